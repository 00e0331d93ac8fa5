//! Matrix-ODE derivatives against sensitivity-process Monte Carlo.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::{random_constant_direction, random_smooth_direction, LqGameSpec, PolicyProfile};
use crate::grid::MatrixSeries;
use crate::mc::{estimate, estimate_extrapolated, LqModel, McConfig, Query};
use crate::ode::{solve_system, Direction, SensitivityRequest};
use crate::seed;

/// Entries with zero standard error count as agreeing within this relative
/// tolerance.
pub const EXACT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// `C0 + C1 cos(πτ) + C2 sin(πτ)`.
    #[default]
    Smooth,
    /// Constant in time.
    Constant,
    /// Every allowed entry equal to `direction_scale`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler–Maruyama on the game grid.
    #[default]
    Euler,
    /// Euler–Maruyama on the game grid and on the grid with halved steps,
    /// combined as `2·fine − coarse`.
    Extrapolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckOptions {
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub scheme: Scheme,
    /// Standard deviation of the random direction coefficients.
    pub direction_scale: f64,
    pub direction_kind: DirectionKind,
    /// Multiplies the Θ source terms of the ODE side. 1.0 except in
    /// fault-injection runs.
    pub theta_source_scale: f64,
}

impl Default for CrosscheckOptions {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            seed: 0,
            antithetic: false,
            scheme: Scheme::Euler,
            direction_scale: 0.5,
            direction_kind: DirectionKind::Smooth,
            theta_source_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckEntry {
    /// 1-based agent whose value is differentiated.
    pub i: usize,
    /// 1-based agent of the first direction.
    pub h: usize,
    /// 1-based agent of the second direction, for second derivatives.
    pub l: Option<usize>,
    pub direction: String,
    pub ode: f64,
    pub mc: Option<f64>,
    pub stderr: Option<f64>,
    /// `(mc − ode)/stderr`; infinite (null in JSON) when the standard error
    /// is zero and the values disagree.
    pub z: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub t0: f64,
    pub x0: DVector<f64>,
    pub n_paths: usize,
    pub mc_seed: u64,
    pub entries: Vec<CrosscheckEntry>,
    pub max_abs_z: f64,
    pub within_2: f64,
    pub pass: bool,
}

/// `|z| ≤ 3` everywhere and `|z| ≤ 2` for at least 95% of entries.
pub fn passes(z: &[f64]) -> bool {
    !z.is_empty()
        && z.iter().all(|v| v.abs() <= 3.0)
        && z.iter().filter(|v| v.abs() <= 2.0).count() as f64 >= 0.95 * z.len() as f64
}

fn z_score(ode: f64, mc: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        (mc - ode) / stderr
    } else if (mc - ode).abs() <= EXACT_TOL * (1.0 + ode.abs()) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// The random direction of every agent used by [`crosscheck`].
pub fn crosscheck_directions(spec: &LqGameSpec, opts: &CrosscheckOptions) -> Vec<MatrixSeries> {
    (0..spec.n_agents())
        .map(|h| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "direction", h as u64));
            match opts.direction_kind {
                DirectionKind::Smooth => random_smooth_direction(spec, h, &mut rng, opts.direction_scale),
                DirectionKind::Constant => random_constant_direction(spec, h, &mut rng, opts.direction_scale),
                DirectionKind::Unit => {
                    let allowed = spec.feedback_range(h);
                    MatrixSeries::constant(DMatrix::from_fn(spec.control_dims[h], spec.state_dim(), |_, c| {
                        if allowed.contains(&c) {
                            opts.direction_scale
                        } else {
                            0.0
                        }
                    }))
                }
            }
        })
        .collect()
}

/// Compare every first derivative `δV_i/δK_h` and every second derivative
/// `δ²V_i/δK_h δK_ℓ` along one random direction per agent.
pub fn crosscheck(
    spec: &LqGameSpec,
    k: &PolicyProfile,
    t0: f64,
    x0: &DVector<f64>,
    opts: &CrosscheckOptions,
) -> Result<CrosscheckReport> {
    let n = spec.n_agents();
    let gains = crosscheck_directions(spec, opts);
    let dirs: Vec<Direction> = gains
        .iter()
        .enumerate()
        .map(|(h, g)| Direction { agent: h, gain: g })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|h| (h..n).map(move |l| (h, l))).collect();

    let mut req = SensitivityRequest::new(dirs.clone(), pairs.clone());
    req.theta_source_scale = opts.theta_source_scale;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for i in 0..n {
        let sol = solve_system(spec, k, &spec.agents[i], &req)?;
        for (h, th) in sol.theta.iter().enumerate() {
            first.push((i, h, th.eval(t0, x0)?));
        }
        for (p, la) in sol.lambda.iter().enumerate() {
            second.push((i, p, la.eval(t0, x0)?));
        }
    }

    let mc_seed = seed::derive(opts.seed, "mc", 0);
    let cfg = McConfig {
        n_paths: opts.n_paths,
        seed: mc_seed,
        antithetic: opts.antithetic,
    };
    let query = Query {
        values: vec![],
        first: first.iter().map(|&(i, h, _)| (i, h)).collect(),
        second: second.iter().map(|&(i, p, _)| (i, p)).collect(),
    };
    let model = LqModel::new(spec, k, &dirs, &pairs)?;
    let est = match opts.scheme {
        Scheme::Euler => estimate(&model, t0, x0, &cfg, &query),
        Scheme::Extrapolated => {
            let fine_spec = spec.refined();
            let fine_gains: Vec<MatrixSeries> = gains.iter().map(MatrixSeries::refined).collect();
            let fine_dirs: Vec<Direction> = fine_gains
                .iter()
                .enumerate()
                .map(|(h, g)| Direction { agent: h, gain: g })
                .collect();
            let fine = LqModel::new(&fine_spec, &k.refined(), &fine_dirs, &pairs)?;
            estimate_extrapolated(&model, &fine, t0, x0, &cfg, &query)
        }
    };

    let entry = |i: usize, h: usize, l: Option<usize>, ode: f64, e: Option<&crate::mc::DerivativeEstimate>, err: &Option<String>| {
        let direction = match l {
            None => format!("d{}", h + 1),
            Some(l) => format!("d{}*d{}", h + 1, l + 1),
        };
        CrosscheckEntry {
            i: i + 1,
            h: h + 1,
            l: l.map(|l| l + 1),
            direction,
            ode,
            mc: e.map(|e| e.value),
            stderr: e.map(|e| e.stderr),
            z: e.map(|e| z_score(ode, e.value, e.stderr)),
            error: err.clone(),
        }
    };
    let (est, err) = match est {
        Ok(e) => (Some(e), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut entries = Vec::new();
    for (q, &(i, h, ode)) in first.iter().enumerate() {
        entries.push(entry(i, h, None, ode, est.as_ref().map(|e| &e.first[q]), &err));
    }
    for (q, &(i, p, ode)) in second.iter().enumerate() {
        let (h, l) = pairs[p];
        entries.push(entry(i, h, Some(l), ode, est.as_ref().map(|e| &e.second[q]), &err));
    }

    let z: Vec<f64> = entries.iter().filter_map(|e| e.z).collect();
    let max_abs_z = z.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let within_2 = if z.is_empty() {
        0.0
    } else {
        z.iter().filter(|v| v.abs() <= 2.0).count() as f64 / z.len() as f64
    };
    let pass = err.is_none() && passes(&z);
    Ok(CrosscheckReport {
        t0,
        x0: x0.clone(),
        n_paths: opts.n_paths,
        mc_seed,
        entries,
        max_abs_z,
        within_2,
        pass,
    })
}
