//! Command-line front end.
//!
//! Exit codes: 0 success (MPG, PASS, certified), 1 input or solver error,
//! 2 CLPG at the given point only, 3 not a potential game / refusal,
//! 4 check failed (crosscheck FAIL, equilibrium not certified).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::crosscheck::{crosscheck, crosscheck_directions, CrosscheckOptions, DirectionKind, Scheme};
use crate::error::{Error, Result};
use crate::io::{load_game, GameFile};
use crate::mc::{simulate_paths, write_paths_csv, LqModel, McConfig};
use crate::nash::{solve_nash, write_trace_csv, NashOptions, VerifyOptions};
use crate::ode::{Direction, InitialState};
use crate::potential::{
    build_distributed_potential, build_line_integral_potential, check_symmetry, PotentialFunction,
    SymmetryOptions, SymmetryReport, Verdict, DEFAULT_N_QUAD, SYMMETRY_REL_TOL,
};
use crate::report::{to_json_bytes, Report, RunManifest};
use crate::PolicyProfile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CLPG: i32 = 2;
pub const EXIT_NOT_POTENTIAL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "potentia", version, about = "Potential-game checks and Nash equilibria for LQ differential games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Game spec (TOML, or JSON with a .json extension).
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record wall-clock time per stage in the manifest.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct Start {
    /// Start time (a grid node); overrides the spec's [initial].
    #[arg(long)]
    pub t0: Option<f64>,
    /// Start state, comma separated; overrides the spec's [initial].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    /// The zero profile.
    Zero,
    /// The spec's [policy].
    Policy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Symmetric-Jacobian potential test.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        /// Relative tolerance on the symmetry discrepancies.
        #[arg(long, default_value_t = SYMMETRY_REL_TOL)]
        tol: f64,
        /// Time of the closed-loop point test.
        #[arg(long, requires = "at_x")]
        at_t: Option<f64>,
        /// State of the closed-loop point test, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "at_t")]
        at_x: Option<Vec<f64>>,
    },
    /// ODE derivatives against Monte Carlo.
    Crosscheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        start: Start,
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        #[arg(long)]
        antithetic: bool,
        #[arg(long, value_enum, default_value_t = Scheme::Euler)]
        scheme: Scheme,
        #[arg(long, default_value_t = 0.5)]
        direction_scale: f64,
        #[arg(long, value_enum, default_value_t = DirectionKind::Smooth)]
        direction_kind: DirectionKind,
        #[arg(long, default_value_t = 1.0, hide = true)]
        fault_theta_scale: f64,
    },
    /// Build a potential function.
    Potential {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Base::Zero)]
        base: Base,
        #[arg(long, default_value_t = DEFAULT_N_QUAD)]
        n_quad: usize,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = SYMMETRY_REL_TOL)]
        tol: f64,
        /// Build the line integral even when the symmetry test fails; the
        /// result is marked uncertified.
        #[arg(long)]
        allow_unverified: bool,
    },
    /// Nash equilibrium by potential descent.
    Nash {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        start: Start,
        #[arg(long, default_value_t = 5000)]
        max_iter: usize,
        /// Stop when the gradient density sup-norm is below this.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Deviation probes per agent and radius.
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// CSV file for the descent trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write simulated state and sensitivity paths as CSV.
    PathsDump {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        start: Start,
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, default_value_t = 0.5)]
        direction_scale: f64,
        #[arg(long, value_enum, default_value_t = DirectionKind::Smooth)]
        direction_kind: DirectionKind,
    },
}

struct Timer {
    enabled: bool,
    stages: BTreeMap<String, f64>,
}

impl Timer {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        if self.enabled {
            self.stages.insert(name.into(), t.elapsed().as_secs_f64());
        }
        out
    }

    fn finish(self, m: &mut RunManifest) {
        if self.enabled {
            m.timings = Some(self.stages);
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn write_report<T: Serialize>(common: &Common, manifest: &RunManifest, result: &T) -> Result<()> {
    emit(common.out.as_deref(), &to_json_bytes(&Report { manifest, result })?)
}

fn policy_or_zero(f: &GameFile) -> PolicyProfile {
    f.policy.clone().unwrap_or_else(|| PolicyProfile::zeros(&f.spec))
}

/// Start point for pathwise commands: flags, then a point in [initial],
/// then the all-ones state at the grid start.
fn start_point(f: &GameFile, s: &Start) -> Result<(f64, DVector<f64>)> {
    let (mut t0, mut x0) = match &f.initial {
        Some(InitialState::Point { t0, x0 }) => (*t0, x0.clone()),
        _ => (f.spec.grid.t0(), DVector::from_element(f.spec.state_dim(), 1.0)),
    };
    if let Some(t) = s.t0 {
        t0 = t;
    }
    if let Some(x) = &s.x0 {
        x0 = DVector::from_vec(x.clone());
    }
    if x0.len() != f.spec.state_dim() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, state dimension is {}",
            x0.len(),
            f.spec.state_dim()
        )));
    }
    Ok((t0, x0))
}

/// Initial law for value-based commands: flags, then [initial], then
/// unit second moment at the grid start.
fn initial_state(f: &GameFile, s: &Start) -> Result<InitialState> {
    if s.t0.is_some() || s.x0.is_some() {
        let (t0, x0) = start_point(f, s)?;
        return Ok(InitialState::Point { t0, x0 });
    }
    Ok(f.initial.clone().unwrap_or_else(|| InitialState::Moment {
        t0: f.spec.grid.t0(),
        m0: DMatrix::identity(f.spec.state_dim(), f.spec.state_dim()),
    }))
}

#[derive(Debug, Serialize)]
pub struct PotentialResult {
    pub source: &'static str,
    pub symmetry: Option<SymmetryReport>,
    pub potential: PotentialFunction,
}

/// Closed form for distributed and team games, line integral otherwise.
pub fn potential_for(
    f: &GameFile,
    base: PolicyProfile,
    n_quad: usize,
    sym: &SymmetryOptions,
    allow_unverified: bool,
) -> Result<PotentialResult> {
    if let Some(d) = &f.distributed {
        return Ok(PotentialResult {
            source: "distributed-closed-form",
            symmetry: None,
            potential: build_distributed_potential(&d.costs, f.spec.grid.len())?,
        });
    }
    if f.spec.is_team() {
        return Ok(PotentialResult {
            source: "team",
            symmetry: None,
            potential: PotentialFunction::Team { agent: 0 },
        });
    }
    let report = check_symmetry(&f.spec, &base, sym)?;
    let potential = build_line_integral_potential(&report, base, n_quad, allow_unverified)?;
    Ok(PotentialResult {
        source: "line-integral",
        symmetry: Some(report),
        potential,
    })
}

#[derive(Debug, Serialize)]
struct NashResult {
    potential_source: &'static str,
    initial: InitialState,
    potential: f64,
    certificate: crate::nash::NashCertificate,
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify {
            common,
            probes,
            tol,
            at_t,
            at_x,
        } => {
            let mut timer = Timer {
                enabled: common.timings,
                stages: BTreeMap::new(),
            };
            let (file, raw) = timer.stage("parse", || load_game(&common.spec))?;
            let opts = SymmetryOptions {
                probes,
                seed: common.seed,
                rel_tol: tol,
                point: at_t.zip(at_x.map(DVector::from_vec)),
            };
            let k = policy_or_zero(&file);
            let report = timer.stage("symmetry", || check_symmetry(&file.spec, &k, &opts))?;
            let mut m = RunManifest::new(
                "verify",
                &raw,
                json!({ "probes": probes, "tol": tol, "at_t": opts.point.as_ref().map(|p| p.0),
                        "at_x": opts.point.as_ref().map(|p| p.1.as_slice().to_vec()) }),
            );
            m.seeds.insert("seed".into(), common.seed);
            timer.finish(&mut m);
            write_report(&common, &m, &report)?;
            eprintln!("verdict: {} (max discrepancy {:e})", report.verdict, report.max_discrepancy());
            Ok(match report.verdict {
                Verdict::Mpg => EXIT_OK,
                Verdict::ClpgAt => EXIT_CLPG,
                Verdict::NotPotential => EXIT_NOT_POTENTIAL,
            })
        }
        Command::Crosscheck {
            common,
            start,
            paths,
            antithetic,
            scheme,
            direction_scale,
            direction_kind,
            fault_theta_scale,
        } => {
            let mut timer = Timer {
                enabled: common.timings,
                stages: BTreeMap::new(),
            };
            let (file, raw) = timer.stage("parse", || load_game(&common.spec))?;
            let (t0, x0) = start_point(&file, &start)?;
            let opts = CrosscheckOptions {
                n_paths: paths,
                seed: common.seed,
                antithetic,
                scheme,
                direction_scale,
                direction_kind,
                theta_source_scale: fault_theta_scale,
            };
            let k = policy_or_zero(&file);
            let report = timer.stage("crosscheck", || crosscheck(&file.spec, &k, t0, &x0, &opts))?;
            let mut m = RunManifest::new("crosscheck", &raw, serde_json::to_value(&opts).expect("plain data"));
            m.seeds.insert("seed".into(), common.seed);
            m.seeds.insert("mc".into(), report.mc_seed);
            timer.finish(&mut m);
            write_report(&common, &m, &report)?;
            eprintln!(
                "{}: max |z| {:.3}, {:.1}% within 2",
                if report.pass { "PASS" } else { "FAIL" },
                report.max_abs_z,
                100.0 * report.within_2
            );
            Ok(if report.pass { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Potential {
            common,
            base,
            n_quad,
            probes,
            tol,
            allow_unverified,
        } => {
            let mut timer = Timer {
                enabled: common.timings,
                stages: BTreeMap::new(),
            };
            let (file, raw) = timer.stage("parse", || load_game(&common.spec))?;
            let base_k = match base {
                Base::Zero => PolicyProfile::zeros(&file.spec),
                Base::Policy => policy_or_zero(&file),
            };
            let sym = SymmetryOptions {
                probes,
                seed: common.seed,
                rel_tol: tol,
                point: None,
            };
            let result = match timer.stage("potential", || potential_for(&file, base_k, n_quad, &sym, allow_unverified)) {
                Err(Error::NotPotential(msg)) => {
                    eprintln!("refused: {msg}");
                    return Ok(EXIT_NOT_POTENTIAL);
                }
                r => r?,
            };
            let mut m = RunManifest::new(
                "potential",
                &raw,
                json!({ "base": base, "n_quad": n_quad, "probes": probes, "tol": tol,
                        "allow_unverified": allow_unverified }),
            );
            m.seeds.insert("seed".into(), common.seed);
            timer.finish(&mut m);
            write_report(&common, &m, &result)?;
            Ok(if result.potential.is_certified() {
                EXIT_OK
            } else {
                EXIT_NOT_POTENTIAL
            })
        }
        Command::Nash {
            common,
            start,
            max_iter,
            tol,
            probes,
            trace,
        } => {
            let mut timer = Timer {
                enabled: common.timings,
                stages: BTreeMap::new(),
            };
            let (file, raw) = timer.stage("parse", || load_game(&common.spec))?;
            let init = initial_state(&file, &start)?;
            let k0 = policy_or_zero(&file);
            let sym = SymmetryOptions {
                seed: crate::seed::derive(common.seed, "symmetry", 0),
                ..SymmetryOptions::default()
            };
            let pot = match timer.stage("potential", || potential_for(&file, k0.clone(), DEFAULT_N_QUAD, &sym, false)) {
                Err(Error::NotPotential(msg)) => {
                    eprintln!("refused: {msg}");
                    return Ok(EXIT_NOT_POTENTIAL);
                }
                r => r?,
            };
            let opts = NashOptions {
                max_iter,
                tol,
                verify: VerifyOptions {
                    probes,
                    seed: crate::seed::derive(common.seed, "verify", 0),
                    ..VerifyOptions::default()
                },
                ..NashOptions::default()
            };
            let out = timer.stage("descent", || solve_nash(&file.spec, &pot.potential, &k0, &init, &opts))?;
            if let Some(p) = &trace {
                write_trace_csv(&out.trace, std::fs::File::create(p)?)?;
            }
            let mut m = RunManifest::new("nash", &raw, serde_json::to_value(&opts).expect("plain data"));
            m.seeds.insert("seed".into(), common.seed);
            m.seeds.insert("symmetry".into(), sym.seed);
            m.seeds.insert("verify".into(), opts.verify.seed);
            timer.finish(&mut m);
            let certified = out.certificate.certified;
            eprintln!(
                "{} after {} iterations, worst improvement {:e}",
                if certified { "certified" } else { "NOT certified" },
                out.certificate.iterations.unwrap_or(0),
                out.certificate.worst_improvement()
            );
            let result = NashResult {
                potential_source: pot.source,
                initial: init,
                potential: out.potential,
                certificate: out.certificate,
            };
            write_report(&common, &m, &result)?;
            Ok(if certified { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::PathsDump {
            common,
            start,
            paths,
            direction_scale,
            direction_kind,
        } => {
            let (file, _) = load_game(&common.spec)?;
            let (t0, x0) = start_point(&file, &start)?;
            let opts = CrosscheckOptions {
                seed: common.seed,
                direction_scale,
                direction_kind,
                ..CrosscheckOptions::default()
            };
            let gains = crosscheck_directions(&file.spec, &opts);
            let dirs: Vec<Direction> = gains
                .iter()
                .enumerate()
                .map(|(h, g)| Direction { agent: h, gain: g })
                .collect();
            let n = file.spec.n_agents();
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|h| (h..n).map(move |l| (h, l))).collect();
            let k = policy_or_zero(&file);
            let model = LqModel::new(&file.spec, &k, &dirs, &pairs)?;
            let cfg = McConfig::new(paths.max(2), crate::seed::derive(common.seed, "mc", 0));
            let mut buf = Vec::new();
            write_paths_csv(simulate_paths(&model, t0, &x0, &cfg, paths)?, &mut buf)?;
            emit(common.out.as_deref(), &buf)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parse arguments, configure threads from `POTENTIA_THREADS`, run, and
/// map errors to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    if let Ok(v) = std::env::var("POTENTIA_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: POTENTIA_THREADS must be a positive integer, got {v:?}");
                return EXIT_ERROR;
            }
        }
    }
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
