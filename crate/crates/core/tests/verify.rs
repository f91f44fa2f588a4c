use fbm_smp::bsde::{solve_first_adjoint, solve_second_adjoint, AdjointSolution};
use fbm_smp::fbm::{sample_paths, HurstParam, PathEnsemble, TimeGrid};
use fbm_smp::forward::{simulate_variations, simulate_zeta, TrajectorySet};
use fbm_smp::girsanov::{GirsanovFactors, SigmaSpec};
use fbm_smp::problem::*;
use fbm_smp::regression::RegressionBasis;
use fbm_smp::verify::*;
use fbm_smp::Error;

struct Fixture {
    pb: ControlProblem,
    e: PathEnsemble,
    f: GirsanovFactors,
    v: ControlPolicy,
    traj: TrajectorySet,
    p: AdjointSolution,
    big_p: AdjointSolution,
}

fn fixture(b: Builtin, h: f64, sigma: f64, v: f64, n: usize, m: usize) -> Fixture {
    let e = sample_paths(HurstParam::new(h).unwrap(), TimeGrid::new(1.0, n).unwrap(), m, 0).unwrap();
    let f = GirsanovFactors::compute(&e, &SigmaSpec::Constant(sigma));
    let pb = ControlProblem::builtin(b, sigma, 1.0, 1.0, ControlSet::Interval { lo: -3.0, hi: 3.0 });
    let v = ControlPolicy::Constant(v);
    let traj = simulate_zeta(&pb, &v, &e, &f).unwrap();
    let basis = RegressionBasis::default();
    let p = solve_first_adjoint(&pb, &traj, &e, &f, basis).unwrap();
    let big_p = solve_second_adjoint(&pb, &traj, &e, &f, &p, basis).unwrap();
    Fixture {
        pb,
        e,
        f,
        v,
        traj,
        p,
        big_p,
    }
}

fn vi(fx: &Fixture, candidates: &[f64], nodes: Option<&[usize]>) -> fbm_smp::Result<VariationalReport> {
    check_variational_inequality(
        &fx.pb,
        &fx.traj,
        &fx.f,
        &fx.p,
        &fx.big_p,
        candidates,
        nodes,
        DEFAULT_N_SE,
        DEFAULT_VI_FLOOR,
    )
}

#[test]
fn optimal_lq_control_satisfies_the_inequality() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -1.0, 32, 20_000);
    let cands = fx.pb.control_set.candidates(13);
    let r = vi(&fx, &cands, None).unwrap();
    assert!(r.pass, "{:?}", r.global_min);
    assert!(r.rejections.is_empty());
    assert_eq!(r.at_current_max_abs, 0.0);
    assert_eq!(r.entries.len(), 31 * 13);
    let at_v = r.entries.iter().find(|e| e.candidate == -1.0).unwrap();
    assert_eq!(at_v.theta, 0.0);
}

#[test]
fn suboptimal_lq_control_is_rejected() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, 0.0, 32, 20_000);
    let r = vi(&fx, &[-1.0, 0.0, 1.0], None).unwrap();
    assert!(!r.pass);
    assert!(!r.rejections.is_empty());
    assert!(r.rejections.iter().all(|e| e.candidate == -1.0));
    assert!(r.global_min.theta < -0.4, "{:?}", r.global_min);
}

#[test]
fn inequality_inputs_are_validated() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -1.0, 8, 200);
    assert!(matches!(vi(&fx, &[], None), Err(Error::Contract(_))));
    assert!(matches!(vi(&fx, &[0.0], Some(&[0])), Err(Error::Domain(_))));
    assert!(matches!(vi(&fx, &[0.0], Some(&[8])), Err(Error::Domain(_))));
    assert_eq!(vi(&fx, &[0.0], Some(&[3, 5])).unwrap().entries.len(), 2);
}

fn duality(fx: &Fixture, alt: f64, tau: f64, eps: f64) -> DualityReport {
    let pert = SpikePerturbation::new(tau, eps, ControlPolicy::Constant(alt), 1.0).unwrap();
    let var = simulate_variations(&fx.pb, &fx.traj, &spike(&fx.v, &pert), &fx.e, &fx.f).unwrap();
    duality_check(&fx.pb, &var, &fx.f, &fx.p, &fx.big_p, &pert, DEFAULT_N_SE).unwrap()
}

#[test]
fn duality_relations_hold_for_lq() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -0.5, 64, 20_000);
    let r = duality(&fx, 1.0, 0.5, 0.1);
    assert!(r.r1.pass, "{:?}", r.r1);
    assert!(r.r2.pass, "{:?}", r.r2);
    assert!(r.l1.pass, "{:?}", r.l1);
    assert!(r.pass);
}

#[test]
fn duality_is_trivial_without_a_perturbation() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -0.5, 16, 500);
    let r = duality(&fx, -0.5, 0.5, 0.1);
    for id in [&r.r1, &r.r2, &r.l1] {
        assert_eq!(id.lhs.mean, 0.0, "{id:?}");
        assert_eq!(id.rhs.mean, 0.0, "{id:?}");
    }
    assert!(r.pass);
}

#[test]
fn duality_needs_variations() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -0.5, 8, 100);
    let pert = SpikePerturbation::new(0.5, 0.1, ControlPolicy::Constant(1.0), 1.0).unwrap();
    assert!(matches!(
        duality_check(&fx.pb, &fx.traj, &fx.f, &fx.p, &fx.big_p, &pert, 3.0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn spike_variations_scale_with_epsilon() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -1.0, 64, 10_000);
    let alt = ControlPolicy::Constant(1.0);
    let r = scaling_experiment(&fx.pb, &fx.v, &alt, 0.5, &[0.2, 0.1, 0.05, 0.025], 2.0, &fx.e, &fx.f).unwrap();
    assert!(r.y1_slope.pass, "{:?}", r.y1_slope);
    assert!(r.y2_slope.pass, "{:?}", r.y2_slope);
    assert!(r.remainder_decreasing, "{:?}", r.points);
    assert!(!r.degenerate && r.pass);
}

#[test]
fn scaling_inputs_are_validated() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -1.0, 16, 100);
    let alt = ControlPolicy::Constant(1.0);
    let run = |ladder: &[f64], p: f64| scaling_experiment(&fx.pb, &fx.v, &alt, 0.5, ladder, p, &fx.e, &fx.f);
    assert!(matches!(run(&[0.2, 0.1, 0.05], 2.0), Err(Error::Contract(_))));
    assert!(matches!(run(&[0.2, 0.1, 0.1, 0.05], 2.0), Err(Error::Contract(_))));
    assert!(matches!(run(&[0.2, 0.1, 0.05, 0.025], 1.0), Err(Error::Domain(_))));
    let same = scaling_experiment(&fx.pb, &fx.v, &fx.v, 0.5, &[0.2, 0.1, 0.05, 0.025], 2.0, &fx.e, &fx.f).unwrap();
    assert!(same.degenerate && !same.pass);
}

fn classical_problem(sigma: f64) -> (ControlProblem, PathEnsemble) {
    let b = Builtin::ClassicalHHalf {
        a: 0.1,
        c: 0.3,
        lambda: 0.0,
        q: 1.0,
    };
    let pb = ControlProblem::builtin(b, sigma, 1.0, 1.0, ControlSet::Interval { lo: -3.0, hi: 3.0 });
    let e = sample_paths(
        HurstParam::new(0.5).unwrap(),
        TimeGrid::new(1.0, 64).unwrap(),
        20_000,
        0,
    )
    .unwrap();
    (pb, e)
}

#[test]
fn both_routes_agree_in_the_brownian_case() {
    let (pb, e) = classical_problem(0.3);
    let r = classical_reduction_check(&pb, &ControlPolicy::Constant(0.0), &e, RegressionBasis::default(), 3.0).unwrap();
    assert!(r.p0_pass && r.energy_pass, "{r:?}");
    // p(0) = q x₀ exp((2a + c² + σ²) T)
    let exact = (0.2f64 + 0.09 + 0.09).exp();
    assert!((r.p0_classical.mean - exact).abs() < 0.01 * exact, "{r:?}");
}

#[test]
fn routes_coincide_without_the_fbm_term() {
    let (pb, e) = classical_problem(0.0);
    let r = classical_reduction_check(&pb, &ControlPolicy::Constant(0.0), &e, RegressionBasis::default(), 3.0).unwrap();
    assert!(r.p0_pass, "{r:?}");
    assert!((r.p0_transformed.mean - r.p0_classical.mean).abs() < 1e-6, "{r:?}");
    // no fBm term leaves only the regression noise floor in either energy
    assert!(
        r.energy_transformed.mean < 1e-3 && r.energy_classical.mean < 1e-3,
        "{r:?}"
    );
}

#[test]
fn classical_reduction_needs_the_brownian_case() {
    let fx = fixture(Builtin::lq_basic(), 0.3, 0.5, -1.0, 8, 50);
    assert!(matches!(
        classical_reduction_check(&fx.pb, &fx.v, &fx.e, RegressionBasis::default(), 3.0),
        Err(Error::Domain(_))
    ));
}
