mod common;

use nalgebra::{DMatrix, DVector};
use potentia::game::{
    AgentCost, DistributedAgentCost, DistributedQuadraticSpec, LqGameSpec, PolicyClass,
};
use potentia::general::{At, CostModel, LqCoefficients};
use potentia::io::{load_game, GameFile};
use potentia::ode::{solve_psi, InitialState};
use potentia::potential::{
    build_distributed_potential, build_general_distributed_fg, build_line_integral_potential, check_pair,
    check_symmetry, PotentialFunction, SymmetryOptions, Verdict,
};
use potentia::{Error, MatrixSeries, PolicyProfile, ScalarSeries, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> GameFile {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name);
    load_game(&path).unwrap().0
}

fn value(spec: &LqGameSpec, k: &PolicyProfile, i: usize, init: &InitialState) -> f64 {
    solve_psi(spec, k, i).unwrap().expect(init).unwrap()
}

fn deviate(spec: &LqGameSpec, k: &PolicyProfile, i: usize, rng: &mut ChaCha8Rng, scale: f64) -> PolicyProfile {
    k.with_agent(i, potentia::game::random_smooth_direction(spec, i, rng, scale))
}

fn spread(v: &[f64]) -> f64 {
    v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - v.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

fn distributed() -> (LqGameSpec, DistributedQuadraticSpec, InitialState) {
    let f = fixture("distributed-mf.toml");
    (f.spec, f.distributed.unwrap().costs, f.initial.unwrap())
}

#[test]
fn fixture_verdicts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let team = fixture("team.toml").spec;
    let k = PolicyProfile::random_smooth(&team, &mut rng, 0.5);
    let r = check_symmetry(&team, &k, &SymmetryOptions::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Mpg);
    assert!(r.max_discrepancy() <= 1e-8, "{}", r.max_discrepancy());

    let (spec, _, _) = distributed();
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let r = check_symmetry(&spec, &k, &SymmetryOptions::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Mpg, "{}", r.max_discrepancy());

    let asym = fixture("asymmetric-R.toml").spec;
    let r = check_symmetry(&asym, &PolicyProfile::zeros(&asym), &SymmetryOptions::default()).unwrap();
    assert_eq!(r.verdict, Verdict::NotPotential);
    assert!(r.max_discrepancy() >= 1e-2);
}

#[test]
fn off_diagonal_control_coupling_breaks_symmetry() {
    let eye = DMatrix::<f64>::identity(2, 2);
    let mut r1 = eye.clone();
    r1[(0, 1)] = 1.0;
    r1[(1, 0)] = 1.0;
    let cost = |r: DMatrix<f64>| AgentCost {
        q: MatrixSeries::constant(eye.clone()),
        r: MatrixSeries::constant(r),
        g: eye.clone(),
    };
    let spec = LqGameSpec {
        grid: TimeGrid::new(0.0, 1.0, 40).unwrap(),
        control_dims: vec![1, 1],
        a: MatrixSeries::constant(DMatrix::zeros(2, 2)),
        b: MatrixSeries::constant(eye.clone()),
        sigma: &eye * 0.5,
        agents: vec![cost(r1), cost(eye.clone())],
        policy_class: PolicyClass::Full,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [PolicyProfile::zeros(&spec), PolicyProfile::random_smooth(&spec, &mut rng, 0.5)] {
        let r = check_symmetry(&spec, &k, &SymmetryOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::NotPotential);
        assert!(r.max_discrepancy() > 1e-2);
        assert!(r.pairs[0].matrix_gap.iter().all(|g| *g >= 0.0));
    }
}

#[test]
fn pair_report_does_not_depend_on_agent_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = common::random_spec(&mut rng, 2, &[1, 1, 1], 10);
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let opts = SymmetryOptions::default();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        assert_eq!(check_pair(&spec, &k, i, j, &opts).unwrap(), check_pair(&spec, &k, j, i, &opts).unwrap());
    }
    assert!(check_pair(&spec, &k, 1, 1, &opts).is_err());
}

#[test]
fn clpg_verdict_at_a_point_where_the_gap_vanishes() {
    // At x = 0 every quadratic form vanishes up to its scalar part; with
    // σ = 0 the scalar parts are zero, so any game is CLPG there.
    let asym = fixture("asymmetric-R.toml").spec;
    let mut spec = asym.clone();
    spec.sigma = DMatrix::zeros(2, 2);
    let opts = SymmetryOptions {
        point: Some((0.0, DVector::zeros(2))),
        ..SymmetryOptions::default()
    };
    let r = check_symmetry(&spec, &PolicyProfile::zeros(&spec), &opts).unwrap();
    assert_eq!(r.verdict, Verdict::ClpgAt);
}

#[test]
fn quadratic_potential_satisfies_the_defining_identity() {
    let (spec, d, init) = distributed();
    let phi = build_distributed_potential(&d, spec.grid.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let p0 = phi.evaluate(&spec, &k, &init).unwrap();
    for n in 0..20 {
        let i = n % spec.n_agents();
        let kd = deviate(&spec, &k, i, &mut rng, 0.7);
        let dphi = phi.evaluate(&spec, &kd, &init).unwrap() - p0;
        let dv = value(&spec, &kd, i, &init) - value(&spec, &k, i, &init);
        assert!((dphi - dv).abs() <= 1e-5 * (1.0 + dv.abs()), "agent {i}: {dphi} vs {dv}");
    }
}

#[test]
fn residual_value_is_invariant_under_own_deviations() {
    let (spec, d, init) = distributed();
    let quad = build_distributed_potential(&d, spec.grid.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let r = check_symmetry(&spec, &k, &SymmetryOptions::default()).unwrap();
    let line = build_line_integral_potential(&r, PolicyProfile::zeros(&spec), 16, false).unwrap();
    for phi in [&quad, &line] {
        for i in 0..spec.n_agents() {
            let u: Vec<f64> = (0..5)
                .map(|_| {
                    let kd = deviate(&spec, &k, i, &mut rng, 0.7);
                    value(&spec, &kd, i, &init) - phi.evaluate(&spec, &kd, &init).unwrap()
                })
                .collect();
            assert!(spread(&u) <= 1e-6, "agent {i}: {u:?}");
        }
    }
}

#[test]
fn line_integral_and_closed_form_differ_by_a_constant() {
    let (spec, d, init) = distributed();
    let quad = build_distributed_potential(&d, spec.grid.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = PolicyProfile::random_smooth(&spec, &mut rng, 0.3);
    let r = check_symmetry(&spec, &z, &SymmetryOptions::default()).unwrap();
    let line = build_line_integral_potential(&r, z.clone(), 16, false).unwrap();
    let gaps: Vec<f64> = (0..10)
        .map(|_| {
            let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
            line.evaluate(&spec, &k, &init).unwrap() - quad.evaluate(&spec, &k, &init).unwrap()
        })
        .collect();
    assert!(spread(&gaps) <= 1e-6, "{gaps:?}");
    assert!((gaps[0] + quad.evaluate(&spec, &z, &init).unwrap()).abs() <= 1e-6);
}

#[test]
fn base_point_changes_the_potential_by_a_constant() {
    let (spec, _, init) = distributed();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
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
    assert!(spread(&gaps) <= 1e-6, "{gaps:?}");
}

#[test]
fn line_integral_vanishes_at_its_base() {
    let (spec, _, init) = distributed();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let r = check_symmetry(&spec, &z, &SymmetryOptions::default()).unwrap();
    let p = build_line_integral_potential(&r, z.clone(), 16, false).unwrap();
    assert_eq!(p.evaluate(&spec, &z, &init).unwrap(), 0.0);
}

#[test]
fn team_potential_tracks_the_shared_value() {
    let f = fixture("team.toml");
    let (spec, init) = (f.spec, f.initial.unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = PolicyProfile::random_smooth(&spec, &mut rng, 0.5);
    let r = check_symmetry(&spec, &k, &SymmetryOptions::default()).unwrap();
    let line = build_line_integral_potential(&r, PolicyProfile::zeros(&spec), 16, false).unwrap();
    let team = PotentialFunction::Team { agent: 0 };
    for i in 0..2 {
        let kd = deviate(&spec, &k, i, &mut rng, 0.7);
        let dv = value(&spec, &k, 0, &init) - value(&spec, &kd, 0, &init);
        for phi in [&line, &team] {
            let dphi = phi.evaluate(&spec, &k, &init).unwrap() - phi.evaluate(&spec, &kd, &init).unwrap();
            assert!((dphi - dv).abs() <= 1e-6, "{dphi} vs {dv}");
        }
    }
}

#[test]
fn refuses_a_non_potential_game_unless_overridden() {
    let spec = fixture("asymmetric-R.toml").spec;
    let k = PolicyProfile::zeros(&spec);
    let r = check_symmetry(&spec, &k, &SymmetryOptions::default()).unwrap();
    match build_line_integral_potential(&r, k.clone(), 16, false) {
        Err(Error::NotPotential(_)) => {}
        other => panic!("expected a refusal, got {other:?}"),
    }
    let p = build_line_integral_potential(&r, k, 16, true).unwrap();
    assert!(!p.is_certified());
}

fn scalar_distributed(n: usize, own: f64, bar: f64, c: f64) -> DistributedQuadraticSpec {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    DistributedQuadraticSpec {
        state_dim: 1,
        control_dim: 1,
        agents: (0..n)
            .map(|_| DistributedAgentCost {
                q: MatrixSeries::constant(one(own)),
                r: MatrixSeries::constant(one(own)),
                g: one(own),
            })
            .collect(),
        q_bar: MatrixSeries::constant(one(bar)),
        r_bar: MatrixSeries::constant(one(bar)),
        g_bar: one(bar),
        gamma: ScalarSeries::constant(c),
        kappa: ScalarSeries::constant(c),
        eta: c,
    }
}

fn quadratic_parts(p: PotentialFunction) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    match p {
        PotentialFunction::Quadratic { q, r, g } => (q.node(0).clone(), r.node(0).clone(), g),
        other => panic!("not quadratic: {other:?}"),
    }
}

#[test]
fn distributed_potential_block_examples() {
    let (q, _, _) = quadratic_parts(build_distributed_potential(&scalar_distributed(2, 1.0, 1.0, 1.0), 3).unwrap());
    assert_eq!(q, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));

    let (q, r, g) = quadratic_parts(build_distributed_potential(&scalar_distributed(3, 0.7, 0.4, 0.0), 3).unwrap());
    for m in [&q, &r, &g] {
        assert_eq!(*m, DMatrix::from_diagonal_element(3, 3, 1.1));
    }

    let (_, r, _) = quadratic_parts(build_distributed_potential(&scalar_distributed(3, 0.0, 1.0, 2.0), 3).unwrap());
    for a in 0..3 {
        for b in 0..3 {
            assert_eq!(r[(a, b)], if a == b { 1.0 } else { -1.0 });
        }
    }
    assert_eq!(r, r.transpose());
}

fn joint_quadratic(q: &DMatrix<f64>, r: &DMatrix<f64>, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
    (x.transpose() * q * x)[0] + (a.transpose() * r * a)[0]
}

#[test]
fn general_builder_reproduces_a_shared_cost() {
    let team = fixture("team.toml").spec;
    let costs = LqCoefficients::new(&team);
    let fg = build_general_distributed_fg(&costs, &[1, 1], &team.grid, (DVector::zeros(2), DVector::zeros(2)), 16, 10, 0)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for m in [0, 50, 100] {
        let at = At::node(&team.grid, m);
        let (x, a) = (common::random_vec(&mut rng, 2), common::random_vec(&mut rng, 2));
        let f = costs.running_cost(0, at, &x, &a);
        assert!((fg.running(at, &x, &a).unwrap() - f).abs() <= 1e-12 * (1.0 + f.abs()));
        let g = costs.terminal_cost(0, &x);
        assert!((fg.terminal(&x).unwrap() - g).abs() <= 1e-12 * (1.0 + g.abs()));
    }
}

#[test]
fn general_builder_matches_the_closed_form_and_has_flat_residuals() {
    let (spec, d, _) = distributed();
    let costs = LqCoefficients::new(&spec);
    let (q, r, g) = quadratic_parts(build_distributed_potential(&d, spec.grid.len()).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let anchor = (common::random_vec(&mut rng, 3), common::random_vec(&mut rng, 3));
    let fg = build_general_distributed_fg(&costs, &[1, 1, 1], &spec.grid, anchor, 16, 10, 0).unwrap();
    let mut gaps = Vec::new();
    let mut tgaps = Vec::new();
    for _ in 0..10 {
        let at = At::node(&spec.grid, 17);
        let (x, a) = (common::random_vec(&mut rng, 3), common::random_vec(&mut rng, 3));
        gaps.push(fg.running(at, &x, &a).unwrap() - joint_quadratic(&q, &r, &x, &a));
        tgaps.push(fg.terminal(&x).unwrap() - (x.transpose() * &g * &x)[0]);
        let h = 1e-4;
        for i in 0..3 {
            let bump = |v: &DVector<f64>, s: f64| {
                let mut v = v.clone();
                v[i] += s;
                v
            };
            let dx = (fg.running_residual(i, at, &bump(&x, h), &a).unwrap()
                - fg.running_residual(i, at, &bump(&x, -h), &a).unwrap())
                / (2.0 * h);
            let da = (fg.running_residual(i, at, &x, &bump(&a, h)).unwrap()
                - fg.running_residual(i, at, &x, &bump(&a, -h)).unwrap())
                / (2.0 * h);
            let dg = (fg.terminal_residual(i, &bump(&x, h)).unwrap() - fg.terminal_residual(i, &bump(&x, -h)).unwrap())
                / (2.0 * h);
            assert!(dx.abs() <= 1e-5 && da.abs() <= 1e-5 && dg.abs() <= 1e-5, "{dx:e} {da:e} {dg:e}");
        }
    }
    assert!(spread(&gaps) <= 1e-8, "{gaps:?}");
    assert!(spread(&tgaps) <= 1e-8, "{tgaps:?}");
}

#[test]
fn general_builder_refuses_asymmetric_cross_hessians() {
    let spec = fixture("asymmetric-R.toml").spec;
    let costs = LqCoefficients::new(&spec);
    match build_general_distributed_fg(&costs, &[1, 1], &spec.grid, (DVector::zeros(2), DVector::zeros(2)), 16, 5, 0) {
        Err(Error::HessianAsymmetry { i, j, gap, .. }) => {
            assert_eq!((i, j), (1, 2));
            assert!(gap > 0.5);
        }
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("expected a refusal"),
    }
    assert!(build_general_distributed_fg(&costs, &[2], &spec.grid, (DVector::zeros(2), DVector::zeros(2)), 16, 5, 0)
        .is_err());
}
