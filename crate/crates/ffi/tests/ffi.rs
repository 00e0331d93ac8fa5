use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use potentia::io::load_game;
use potentia::nash::{solve_nash, NashOptions};
use potentia::ode::solve_psi;
use potentia::potential::PotentialFunction;
use potentia::PolicyProfile;
use potentia_ffi::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
}

fn load(name: &str) -> *mut PotentiaGame {
    let path = CString::new(fixture(name).to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { potentia_game_load(path.as_ptr(), &mut g) }, PotentiaStatus::Ok);
    assert!(!g.is_null());
    g
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { potentia_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    assert!(n > 0);
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_string()
}

#[test]
fn verdicts_match_the_fixtures() {
    for (name, want) in [
        ("team.toml", PotentiaVerdict::Mpg),
        ("distributed-mf.toml", PotentiaVerdict::Mpg),
        ("asymmetric-R.toml", PotentiaVerdict::NotPotential),
    ] {
        let g = load(name);
        let mut v = PotentiaVerdict::Mpg;
        let mut gap = -1.0;
        assert_eq!(unsafe { potentia_verify(g, 8, 0, &mut v, &mut gap) }, PotentiaStatus::Ok);
        assert_eq!(v, want, "{name}");
        assert!(gap >= 0.0);
        unsafe { potentia_game_free(g) };
    }
}

#[test]
fn dims_and_value_agree_with_the_library() {
    let g = load("distributed-mf.toml");
    let (mut n, mut d, mut nodes) = (0, 0, 0);
    assert_eq!(unsafe { potentia_game_dims(g, &mut n, &mut d, &mut nodes) }, PotentiaStatus::Ok);
    let f = load_game(&fixture("distributed-mf.toml")).unwrap().0;
    assert_eq!((n, d, nodes), (f.spec.n_agents(), f.spec.state_dim(), f.spec.grid.len()));
    let k = f.policy.clone().unwrap_or_else(|| PolicyProfile::zeros(&f.spec));
    for i in 0..n {
        let mut v = f64::NAN;
        assert_eq!(unsafe { potentia_value(g, i, &mut v) }, PotentiaStatus::Ok);
        let init = f.initial.clone().unwrap();
        assert_eq!(v, solve_psi(&f.spec, &k, i).unwrap().expect(&init).unwrap());
    }
    let mut v = 0.0;
    assert_eq!(unsafe { potentia_value(g, n, &mut v) }, PotentiaStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    unsafe { potentia_game_free(g) };
}

#[test]
fn team_equilibrium_matches_the_direct_solve() {
    let g = load("team.toml");
    let mut eq = ptr::null_mut();
    assert_eq!(unsafe { potentia_nash_solve(g, 0, 0.0, 0, &mut eq) }, PotentiaStatus::Ok);
    let (mut certified, mut pot, mut worst, mut iters) = (false, 0.0, 0.0, 0);
    assert_eq!(
        unsafe { potentia_equilibrium_summary(eq, &mut certified, &mut pot, &mut worst, &mut iters) },
        PotentiaStatus::Ok
    );
    assert!(certified);
    assert!(iters > 0);

    let f = load_game(&fixture("team.toml")).unwrap().0;
    let direct = solve_nash(
        &f.spec,
        &PotentialFunction::Team { agent: 0 },
        &PolicyProfile::zeros(&f.spec),
        f.initial.as_ref().unwrap(),
        &NashOptions::default(),
    )
    .unwrap();
    assert_eq!(pot, direct.potential);

    let (mut rows, mut cols) = (0, 0);
    assert_eq!(
        unsafe { potentia_equilibrium_gain(eq, 1, 0, ptr::null_mut(), 0, &mut rows, &mut cols) },
        PotentiaStatus::InvalidArgument
    );
    let mut buf = vec![0.0; rows * cols];
    let last = f.spec.grid.len() - 1;
    assert_eq!(
        unsafe { potentia_equilibrium_gain(eq, 1, last, buf.as_mut_ptr(), buf.len(), &mut rows, &mut cols) },
        PotentiaStatus::Ok
    );
    assert_eq!(buf.as_slice(), direct.certificate.profile.gains[1].node(last).as_slice());
    assert_eq!(
        unsafe { potentia_equilibrium_gain(eq, 1, last + 1, buf.as_mut_ptr(), buf.len(), &mut rows, &mut cols) },
        PotentiaStatus::InvalidArgument
    );
    unsafe {
        potentia_equilibrium_free(eq);
        potentia_game_free(g);
    }
}

#[test]
fn non_potential_game_is_refused() {
    let g = load("asymmetric-R.toml");
    let mut eq = ptr::null_mut();
    assert_eq!(unsafe { potentia_nash_solve(g, 0, 0.0, 0, &mut eq) }, PotentiaStatus::NotPotential);
    assert!(eq.is_null());
    unsafe { potentia_game_free(g) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { potentia_game_load(ptr::null(), &mut g) }, PotentiaStatus::NullArgument);
    assert_eq!(last_error(), "path is null");

    let bad = CString::new("[grid]\nt0 = 0.0\nhorizon = 1.0\nsteps = \"many\"\n").unwrap();
    assert_eq!(unsafe { potentia_game_parse(bad.as_ptr(), 0, &mut g) }, PotentiaStatus::Parse);
    assert!(last_error().contains("grid.steps"));

    let missing = CString::new("/nonexistent/game.toml").unwrap();
    assert_eq!(unsafe { potentia_game_load(missing.as_ptr(), &mut g) }, PotentiaStatus::Io);
    assert!(g.is_null());

    let mut v = PotentiaVerdict::Mpg;
    assert_eq!(unsafe { potentia_verify(ptr::null(), 8, 0, &mut v, ptr::null_mut()) }, PotentiaStatus::NullArgument);

    // Truncation still reports the full length.
    let mut small = [0u8; 4];
    let need = unsafe { potentia_last_error(small.as_mut_ptr().cast(), small.len()) };
    assert_eq!(need, "game is null".len() + 1);
    assert_eq!(&small, b"gam\0");

    unsafe {
        potentia_game_free(ptr::null_mut());
        potentia_equilibrium_free(ptr::null_mut());
    }
}

#[test]
fn json_round_trip_parses() {
    let f = load_game(&fixture("team.toml")).unwrap().0;
    let text = CString::new(potentia::io::to_json_string(&f)).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { potentia_game_parse(text.as_ptr(), 1, &mut g) }, PotentiaStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { potentia_game_dims(g, &mut n, ptr::null_mut(), ptr::null_mut()) }, PotentiaStatus::Ok);
    assert_eq!(n, f.spec.n_agents());
    unsafe { potentia_game_free(g) };
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(potentia_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libpotentia_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = std::process::Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).arg(fixture("team.toml")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f = load_game(&fixture("team.toml")).unwrap().0;
    let v = solve_psi(&f.spec, &PolicyProfile::zeros(&f.spec), 0)
        .unwrap()
        .expect(f.initial.as_ref().unwrap())
        .unwrap();
    let io = PotentiaStatus::Io as i32;
    assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("0 {v:.6} {io} 1\n"));
}
