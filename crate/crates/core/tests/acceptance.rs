//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary
//! so the lines are always printed.

mod common;

use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use potentia::crosscheck::{crosscheck, CrosscheckOptions, DirectionKind, Scheme};
use potentia::game::{
    random_smooth_direction, DistributedAgentCost, DistributedQuadraticSpec, LqGameSpec,
};
use potentia::general::{At, LqCoefficients};
use potentia::io::{load_game, GameFile};
use potentia::nash::{solve_nash, NashOptions};
use potentia::ode::{solve_lambda, solve_psi, solve_theta, InitialState};
use potentia::potential::{
    build_distributed_potential, build_general_distributed_fg, build_line_integral_potential, check_symmetry,
    PotentialFunction, SymmetryOptions, Verdict,
};
use potentia::{MatrixSeries, PolicyProfile, ScalarSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn fixture(name: &str) -> GameFile {
    load_game(&fixture_path(name)).unwrap().0
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spread(v: &[f64]) -> f64 {
    v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - v.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

fn value(spec: &LqGameSpec, k: &PolicyProfile, i: usize, init: &InitialState) -> f64 {
    solve_psi(spec, k, i).unwrap().expect(init).unwrap()
}

fn bumped(spec: &LqGameSpec, k: &PolicyProfile, h: usize, dir: &MatrixSeries, eps: f64) -> PolicyProfile {
    k.with_agent(h, k.gains[h].zip_with(dir, spec.grid.len(), |a, b| a + b * eps))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut z = Vec::new();
    for seed in 1..=5 {
        let (spec, k, x0) = common::equivalence_case(seed);
        let opts = CrosscheckOptions {
            n_paths: 20_000,
            seed,
            scheme: Scheme::Extrapolated,
            ..CrosscheckOptions::default()
        };
        let r = crosscheck(&spec, &k, 0.0, &x0, &opts).map_err(|e| e.to_string())?;
        for e in &r.entries {
            z.push(e.z.unwrap_or(f64::INFINITY));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = z.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let within = z.iter().filter(|v| v.abs() <= 2.0).count() as f64 / z.len() as f64;
    check(
        potentia::crosscheck::passes(&z) && secs < 60.0,
        format!("{} entries, max |z| {max:.2}, {:.0}% within 2, {secs:.1} s", z.len(), 100.0 * within),
    )
}

fn criterion_2() -> Outcome {
    let spec = common::scalar_handcheck();
    let opts = CrosscheckOptions {
        n_paths: 16,
        direction_kind: DirectionKind::Unit,
        direction_scale: 1.0,
        ..CrosscheckOptions::default()
    };
    let r = crosscheck(&spec, &PolicyProfile::zeros(&spec), 0.0, &DVector::from_element(1, 1.0), &opts)
        .map_err(|e| e.to_string())?;
    let e = r.entries.iter().find(|e| e.l.is_none()).ok_or("no first-derivative entry")?;
    let mc = e.mc.unwrap_or(f64::NAN);
    check(
        (e.ode - 1.0).abs() <= 1e-8 && (mc - 1.0).abs() <= 1e-8,
        format!("ODE {:.9}, MC {mc:.9}", e.ode),
    )
}

fn verdict_of(name: &str) -> (Verdict, f64) {
    let f = fixture(name);
    let k = f.policy.clone().unwrap_or_else(|| PolicyProfile::zeros(&f.spec));
    let r = check_symmetry(&f.spec, &k, &SymmetryOptions::default()).unwrap();
    (r.verdict, r.max_discrepancy())
}

fn criterion_3() -> Outcome {
    let (t, td) = verdict_of("team.toml");
    let (d, dd) = verdict_of("distributed-mf.toml");
    let (a, ad) = verdict_of("asymmetric-R.toml");
    check(
        t == Verdict::Mpg && td <= 1e-8 && d == Verdict::Mpg && a == Verdict::NotPotential && ad >= 1e-2,
        format!("team {t} ({td:.1e}), distributed-mf {d} ({dd:.1e}), asymmetric-R {a} ({ad:.2e})"),
    )
}

fn distributed() -> (LqGameSpec, DistributedQuadraticSpec, InitialState) {
    let f = fixture("distributed-mf.toml");
    (f.spec, f.distributed.unwrap().costs, f.initial.unwrap())
}

fn criterion_4() -> Outcome {
    let (spec, d, init) = distributed();
    let phi = build_distributed_potential(&d, spec.grid.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let p0 = phi.evaluate(&spec, &k, &init).unwrap();
    let mut worst = 0.0_f64;
    for n in 0..20 {
        let i = n % spec.n_agents();
        let kd = k.with_agent(i, random_smooth_direction(&spec, i, &mut rng, 0.7));
        let dphi = phi.evaluate(&spec, &kd, &init).unwrap() - p0;
        let dv = value(&spec, &kd, i, &init) - value(&spec, &k, i, &init);
        worst = worst.max((dphi - dv).abs() / (1.0 + dv.abs()));
    }
    check(worst <= 1e-5, format!("20 deviations, max |ΔΦ − ΔV|/(1+|ΔV|) = {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let (spec, d, init) = distributed();
    let quad = build_distributed_potential(&d, spec.grid.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = PolicyProfile::random_smooth(&spec, &mut rng, 0.3);
    let r = check_symmetry(&spec, &z, &SymmetryOptions::default()).unwrap();
    let line = build_line_integral_potential(&r, z, 16, false).unwrap();
    let gaps: Vec<f64> = (0..10)
        .map(|_| {
            let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
            line.evaluate(&spec, &k, &init).unwrap() - quad.evaluate(&spec, &k, &init).unwrap()
        })
        .collect();
    check(spread(&gaps) <= 1e-6, format!("10 profiles, spread {:.1e}", spread(&gaps)))
}

fn criterion_6() -> Outcome {
    let (spec, _, init) = distributed();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z1 = PolicyProfile::random_smooth(&spec, &mut rng, 0.3);
    let z2 = PolicyProfile::random_smooth(&spec, &mut rng, 0.3);
    let r = check_symmetry(&spec, &z1, &SymmetryOptions::default()).unwrap();
    let p1 = build_line_integral_potential(&r, z1, 16, false).unwrap();
    let p2 = build_line_integral_potential(&r, z2, 16, false).unwrap();
    let gaps: Vec<f64> = (0..10)
        .map(|_| {
            let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
            p1.evaluate(&spec, &k, &init).unwrap() - p2.evaluate(&spec, &k, &init).unwrap()
        })
        .collect();
    check(spread(&gaps) <= 1e-6, format!("10 profiles, spread {:.1e}", spread(&gaps)))
}

fn criterion_7() -> Outcome {
    let f = fixture("team.toml");
    let (spec, init) = (f.spec, f.initial.unwrap());
    let out = solve_nash(
        &spec,
        &PotentialFunction::Team { agent: 0 },
        &PolicyProfile::zeros(&spec),
        &init,
        &NashOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let c = &spec.agents[0];
    let oracle = common::riccati_gain(&spec.grid, spec.a.node(0), spec.b.node(0), c.q.node(0), c.r.node(0), &c.g, 20);
    let gap = oracle
        .iter()
        .enumerate()
        .fold(0.0_f64, |a, (m, o)| a.max((out.certificate.profile.joint_node(m) - o).amax()));
    let probes = out.certificate.agents.iter().map(|a| a.probes).min().unwrap_or(0);
    let worst = out.certificate.worst_improvement();
    check(
        gap <= 1e-4 && worst >= -1e-5 && probes >= 150,
        format!("gain gap {gap:.1e}, worst improvement {worst:.1e} over {probes} probes/agent"),
    )
}

/// Dyadic entries so the block formulas are exact in floating point.
fn dyadic<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-8..=8) as f64 / 4.0);
    &m + m.transpose()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for n_agents in [2, 3] {
        let (nx, nu) = (2, 1);
        let agents: Vec<DistributedAgentCost> = (0..n_agents)
            .map(|_| DistributedAgentCost {
                q: MatrixSeries::constant(dyadic(&mut rng, nx)),
                r: MatrixSeries::constant(dyadic(&mut rng, nu)),
                g: dyadic(&mut rng, nx),
            })
            .collect();
        let (qb, rb, gb) = (dyadic(&mut rng, nx), dyadic(&mut rng, nu), dyadic(&mut rng, nx));
        let (gamma, kappa, eta) = (0.5, 1.5, 0.75);
        let d = DistributedQuadraticSpec {
            state_dim: nx,
            control_dim: nu,
            agents: agents.clone(),
            q_bar: MatrixSeries::constant(qb.clone()),
            r_bar: MatrixSeries::constant(rb.clone()),
            g_bar: gb.clone(),
            gamma: ScalarSeries::constant(gamma),
            kappa: ScalarSeries::constant(kappa),
            eta,
        };
        let PotentialFunction::Quadratic { q, r, g } = build_distributed_potential(&d, 3).unwrap() else {
            return Err("not a quadratic potential".into());
        };
        let expect = |own: &dyn Fn(usize) -> DMatrix<f64>, bar: &DMatrix<f64>, c: f64, got: &DMatrix<f64>| {
            let b = bar.nrows();
            for i in 0..n_agents {
                for j in 0..n_agents {
                    let want = if i == j { own(i) + bar } else { bar * (-c / (n_agents - 1) as f64) };
                    if got.view((i * b, j * b), (b, b)) != want {
                        return false;
                    }
                }
            }
            true
        };
        let ok = expect(&|i| agents[i].q.node(0).clone(), &qb, gamma, q.node(0))
            && expect(&|i| agents[i].r.node(0).clone(), &rb, kappa, r.node(0))
            && expect(&|i| agents[i].g.clone(), &gb, eta, &g);
        if !ok {
            return Err(format!("block mismatch for N = {n_agents}"));
        }
        checked += q.node(0).len() + r.node(0).len() + g.len();
    }
    Ok(format!("N = 2, 3: {checked} entries exact"))
}

fn criterion_9() -> Outcome {
    let eps: Vec<f64> = (0..7).map(|j| 1e-2 / 2f64.powi(j)).collect();
    // Normalised ratios (e(ε)/ε^p) / (e(ε/2)/(ε/2)^p) for consecutive ε.
    let ratios = |errs: &[f64], p: i32| -> Vec<f64> {
        errs.windows(2).zip(eps.windows(2)).map(|(e, h)| (e[0] / h[0].powi(p)) / (e[1] / h[1].powi(p))).collect()
    };
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = common::random_spec(&mut rng, 2, &[1, 1], 50);
        let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.4);
        let init = InitialState::Point {
            t0: 0.0,
            x0: common::random_vec(&mut rng, 2),
        };
        for (i, h) in [(0, 0), (0, 1), (1, 0)] {
            let dir = random_smooth_direction(&spec, h, &mut rng, 1.0);
            let d = solve_theta(&spec, &k, i, h, &dir).unwrap().expect(&init).unwrap();
            let v0 = value(&spec, &k, i, &init);
            let errs: Vec<f64> = eps
                .iter()
                .map(|&e| ((value(&spec, &bumped(&spec, &k, h, &dir, e), i, &init) - v0) / e - d).abs())
                .collect();
            first.extend(ratios(&errs, 1));
        }
        for (i, h, l) in [(0, 0, 1), (1, 1, 1), (0, 1, 0)] {
            let kp = random_smooth_direction(&spec, h, &mut rng, 1.0);
            let kpp = random_smooth_direction(&spec, l, &mut rng, 1.0);
            let lam = solve_lambda(&spec, &k, i, h, l, &kp, &kpp).unwrap().lambda.expect(&init).unwrap();
            let v = |a: f64, b: f64| value(&spec, &bumped(&spec, &bumped(&spec, &k, h, &kp, a), l, &kpp, b), i, &init);
            // Central second differences are O(ε²); round-off grows like
            // 1/ε², so the ladder stops at ε/8.
            let errs: Vec<f64> = eps[..4]
                .iter()
                .map(|&e| ((v(e, e) - v(e, -e) - v(-e, e) + v(-e, -e)) / (4.0 * e * e) - lam).abs())
                .collect();
            second.extend(ratios(&errs, 2));
        }
    }
    let bad = |r: &[f64]| r.iter().filter(|x| !(0.7..=1.3).contains(*x)).count();
    let range = |r: &[f64]| (r.iter().cloned().fold(f64::INFINITY, f64::min), r.iter().cloned().fold(0.0, f64::max));
    let ((f0, f1), (s0, s1)) = (range(&first), range(&second));
    check(
        bad(&first) == 0 && bad(&second) == 0,
        format!(
            "first-order ratios in [{f0:.3}, {f1:.3}] ({} checks), second-order in [{s0:.3}, {s1:.3}] ({} checks)",
            first.len(),
            second.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let (spec, d, _) = distributed();
    let costs = LqCoefficients::new(&spec);
    let PotentialFunction::Quadratic { q, r, .. } = build_distributed_potential(&d, spec.grid.len()).unwrap() else {
        return Err("not a quadratic potential".into());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let anchor = (common::random_vec(&mut rng, 3), common::random_vec(&mut rng, 3));
    let fg = build_general_distributed_fg(&costs, &[1, 1, 1], &spec.grid, anchor, 16, 10, 0).map_err(|e| e.to_string())?;
    let (mut gaps, mut resid) = (Vec::new(), 0.0_f64);
    for n in 0..10 {
        let at = At::node(&spec.grid, 10 * n);
        let (x, a) = (common::random_vec(&mut rng, 3), common::random_vec(&mut rng, 3));
        let closed = (x.transpose() * q.node(at.node) * &x)[0] + (a.transpose() * r.node(at.node) * &a)[0];
        gaps.push(fg.running(at, &x, &a).unwrap() - closed);
        let h = 1e-4;
        for i in 0..3 {
            let bump = |v: &DVector<f64>, s: f64| {
                let mut v = v.clone();
                v[i] += s;
                v
            };
            let u = |x: &DVector<f64>, a: &DVector<f64>| fg.running_residual(i, at, x, a).unwrap();
            let dx = (u(&bump(&x, h), &a) - u(&bump(&x, -h), &a)) / (2.0 * h);
            let da = (u(&x, &bump(&a, h)) - u(&x, &bump(&a, -h))) / (2.0 * h);
            resid = resid.max(dx.abs()).max(da.abs());
        }
    }
    let asym = fixture("asymmetric-R.toml").spec;
    let asym_costs = LqCoefficients::new(&asym);
    let refused = matches!(
        build_general_distributed_fg(&asym_costs, &[1, 1], &asym.grid, (DVector::zeros(2), DVector::zeros(2)), 16, 5, 0),
        Err(potentia::Error::HessianAsymmetry { .. })
    );
    check(
        spread(&gaps) <= 1e-8 && resid <= 1e-5 && refused,
        format!(
            "F − closed form spread {:.1e}, max |∂U_f| {resid:.1e}, asymmetric input {}",
            spread(&gaps),
            if refused { "refused" } else { "accepted" }
        ),
    )
}

fn criterion_11() -> Outcome {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_potentia"))
            .args(["crosscheck", fixture_path("team.toml").to_str().unwrap(), "--seed", "11"])
            .env("POTENTIA_THREADS", threads)
            .output()
            .unwrap()
    };
    let (a, b) = (run("1"), run("8"));
    // The verdict inside the report does not matter here, only that both
    // runs produce the same report.
    let same = a.stdout == b.stdout && a.status.code() == b.status.code();
    check(
        same && !a.stdout.is_empty(),
        format!("{} report bytes, identical under 1 and 8 threads: {same}", a.stdout.len()),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("ODE/MC equivalence on 5 random specs", criterion_1),
        ("scalar hand check", criterion_2),
        ("symmetric-Jacobian verdicts", criterion_3),
        ("potential defining identity", criterion_4),
        ("line integral vs closed form", criterion_5),
        ("base-point gauge", criterion_6),
        ("Nash via potential descent", criterion_7),
        ("block assembly", criterion_8),
        ("derivatives vs finite differences", criterion_9),
        ("general distributed F, G builder", criterion_10),
        ("determinism across thread counts", criterion_11),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("PASS criterion {}: {name}: {d}", n + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {d}", n + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
