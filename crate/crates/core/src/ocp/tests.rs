use super::*;
use crate::solver::{kkt_residual, solve, SolverSettings, SolverState, SolveStatus};
use crate::trajectory::{reference_wheel_rates, TrajectorySpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn circle_refs(n: usize, dt: f64) -> Vec<ReferenceSample<f64>> {
    TrajectorySpec::<f64>::default_circle().horizon(3.0, n, dt).unwrap()
}

fn problem(n: usize, integrator: Integrator, deadzone: bool) -> OcpProblem<f64> {
    let config = HorizonConfig { steps: n, dt: 0.1, integrator, deadzone_in_model: deadzone };
    let refs = circle_refs(n, 0.1);
    let x0 = Pose::new(refs[0].pose.x() + 0.05, refs[0].pose.y() - 0.03, refs[0].pose.alpha + 0.02);
    build_nlp(config, Weights::default(), Bounds::default(), PlatformParams::default(), &refs, x0, WheelRates::new(0.3, 0.25)).unwrap()
}

fn random_z(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..5 * n + 3)
        .map(|i| if i % 5 >= 3 { rng.gen_range(0.1..0.8) } else { rng.gen_range(-3.0..3.0) })
        .collect()
}

#[test]
fn dimensions() {
    let p = problem(30, Integrator::Euler, true);
    assert_eq!(p.num_variables(), 153);
    assert_eq!(p.num_equalities(), 95);
    assert_eq!(p.num_inequalities(), 58);
    assert_eq!(p.hessian_blocks().iter().sum::<usize>(), 153);
}

#[test]
fn reference_count_is_checked() {
    let refs = circle_refs(4, 0.1);
    let cfg = HorizonConfig { steps: 5, ..HorizonConfig::default() };
    let err = build_nlp(cfg, Weights::default(), Bounds::default(), PlatformParams::default(), &refs, Pose::identity(), WheelRates::splat(0.2));
    assert_eq!(err, Err(OcpError::Dimension { what: "references", expected: 6, found: 5 }));
}

#[test]
fn zero_weights_zero_cost() {
    let cfg = HorizonConfig::<f64> { steps: 1, ..HorizonConfig::default() };
    let p = build_nlp(cfg, Weights::zero(), Bounds::default(), PlatformParams::default(), &circle_refs(1, 0.1), Pose::identity(), WheelRates::splat(0.2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let z = random_z(&mut rng, 1);
        assert_eq!(p.objective(&z), 0.0);
        let mut g = vec![1.0; 8];
        p.gradient(&z, &mut g);
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn rollout_has_zero_defects() {
    for integrator in [Integrator::Euler, Integrator::Rk4] {
        let p = problem(30, integrator, true);
        let controls: Vec<_> = (0..30).map(|k| WheelRates::new(0.3 + 0.01 * k as f64, 0.5 - 0.005 * k as f64)).collect();
        let z = p.rollout(&controls).unwrap();
        let mut c = vec![0.0; p.num_equalities()];
        p.equalities(z.as_slice(), &mut c);
        for v in c {
            assert!(v.abs() <= 1e-12, "{v}");
        }
    }
}

#[test]
fn perfect_tracking_costs_nothing() {
    let n = 10;
    let refs = circle_refs(n, 0.1);
    let params = PlatformParams::default();
    let cfg = HorizonConfig { steps: n, dt: 0.1, integrator: Integrator::Euler, deadzone_in_model: false };
    let w = Weights { r: [0.0; 2], ..Weights::default() };
    let p = build_nlp(cfg, w, Bounds::default(), params, &refs, refs[0].pose, reference_wheel_rates(&params, &refs[0])).unwrap();
    let mut z = DecisionVector::zeros(n);
    for k in 0..=n {
        z.set_state(k, refs[k].pose);
        if k < n {
            z.set_control(k, reference_wheel_rates(&params, &refs[k]));
        }
    }
    assert!(p.objective(z.as_slice()).abs() < 1e-20);
}

#[test]
fn defect_examples() {
    let cfg = HorizonConfig::<f64>::default();
    let params = PlatformParams::default();
    let r = shooting_defect(&cfg, &params, &Pose::identity(), WheelRates::splat(1.0), &Pose::identity());
    assert!((r[0] + 0.03).abs() < 1e-15 && r[1].abs() < 1e-15 && r[2].abs() < 1e-15);

    let x = Pose::new(0.4, -1.0, 0.7);
    let u = WheelRates::new(0.5, 0.3);
    let model = SkidSteerModel::new(params, true);
    let next = model.step(Integrator::Euler, &x, u, 0.1).unwrap();
    let r = shooting_defect(&cfg, &params, &x, u, &next);
    assert!(r.iter().all(|v| v.abs() < 1e-15));
    let bumped = Pose::new(next.x() + 1e-3, next.y(), next.alpha);
    let r = shooting_defect(&cfg, &params, &x, u, &bumped);
    assert!((r[0] - 1e-3).abs() < 1e-15 && r[1].abs() < 1e-15);
}

#[test]
fn acceleration_examples() {
    let cfg = HorizonConfig::<f64> { steps: 3, ..HorizonConfig::default() };
    let mut z = DecisionVector::zeros(3);
    for k in 0..3 {
        z.set_control(k, WheelRates::splat(0.4));
    }
    assert!(acceleration_rows(&cfg, &z).iter().all(|r| r == &[0.0, 0.0]));
    z.set_control(0, WheelRates::new(0.1, 0.1));
    z.set_control(1, WheelRates::new(0.12, 0.1));
    let rows = acceleration_rows(&cfg, &z);
    assert!((rows[0][0] - 0.2).abs() < 1e-12 && rows[0][1] == 0.0);
    for k in 0..3 {
        z.set_control(k, WheelRates::splat(0.2 + 0.03 * k as f64));
    }
    for row in acceleration_rows(&cfg, &z) {
        assert!((row[0] - 0.3).abs() < 1e-12 && (row[1] - 0.3).abs() < 1e-12);
    }
}

#[test]
fn derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for integrator in [Integrator::Euler, Integrator::Rk4] {
        for deadzone in [false, true] {
            let p = problem(5, integrator, deadzone);
            for _ in 0..20 {
                let z = random_z(&mut rng, 5);
                let err = gradient_check(&p, &z);
                assert!(err < 1e-5, "{integrator:?} dz={deadzone}: {err}");
            }
        }
    }
}

#[test]
fn linear_rows_match_exactly() {
    let p = problem(5, Integrator::Euler, false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = random_z(&mut rng, 5);
    let h = 1e-6;
    let jac = p.inequality_jacobian(&z);
    let mut gp = vec![0.0; p.num_inequalities()];
    let mut gm = gp.clone();
    for (r, row) in jac.iter().enumerate() {
        for &(j, a) in &row.entries {
            let mut zz = z.clone();
            zz[j] += h;
            p.inequalities(&zz, &mut gp);
            zz[j] -= 2.0 * h;
            p.inequalities(&zz, &mut gm);
            assert!(((gp[r] - gm[r]) / (2.0 * h) - a).abs() < 1e-6);
        }
    }
}

#[test]
fn transpose_product_matches_rows() {
    let p = problem(6, Integrator::Rk4, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random_z(&mut rng, 6);
    let lam: Vec<f64> = (0..p.num_equalities()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mu: Vec<f64> = (0..p.num_inequalities()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut fast = vec![0.0; p.num_variables()];
    p.add_constraint_transpose_product(&z, &lam, &mu, &mut fast);
    let mut slow = vec![0.0; p.num_variables()];
    for (row, l) in p.equality_jacobian(&z).iter().zip(&lam) {
        for &(i, a) in &row.entries {
            slow[i] += a * l;
        }
    }
    for (row, m) in p.inequality_jacobian(&z).iter().zip(&mu) {
        for &(i, a) in &row.entries {
            slow[i] += a * m;
        }
    }
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_hessian(rng: &mut ChaCha8Rng, sizes: &[usize]) -> BlockHessian<f64> {
    let mut h = BlockHessian::new(sizes, 1.0);
    let n: usize = sizes.iter().sum();
    for _ in 0..6 {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = s.iter().map(|v| v * rng.gen_range(0.5..30.0) + rng.gen_range(-0.1..0.1)).collect();
        h.update(&s, &y, 1e-8);
    }
    h
}

/// The condensed subproblem must reproduce the dense full-space QP: same step,
/// same multipliers.
#[test]
fn condensed_qp_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut solved, mut with_active) = (0, 0);
    for case in 0..30 {
        let n = 2 + case % 9;
        let integrator = if case % 2 == 0 { Integrator::Euler } else { Integrator::Rk4 };
        let mut p = problem(n, integrator, true);
        if case % 3 == 0 {
            p.bounds.pose_min = [-20.0, -1.5, -50.0];
            p.bounds.pose_max = [20.0, 20.0, 50.0];
        }
        // controls near the box so some bounds bind
        let controls: Vec<_> = (0..n).map(|_| WheelRates::new(rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8))).collect();
        let mut z = p.rollout(&controls).unwrap().into_vec();
        for v in z.iter_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        let nv = p.num_variables();
        let (mut lb, mut ub) = (vec![0.0; nv], vec![0.0; nv]);
        p.variable_bounds(&mut lb, &mut ub);
        for i in 0..nv {
            z[i] = z[i].clamp(lb[i], ub[i]);
        }
        let (mut glo, mut ghi) = (vec![0.0; p.num_inequalities()], vec![0.0; p.num_inequalities()]);
        p.inequality_bounds(&mut glo, &mut ghi);
        let mut grad = vec![0.0; nv];
        p.gradient(&z, &mut grad);
        let mut c = vec![0.0; p.num_equalities()];
        p.equalities(&z, &mut c);
        let mut g = vec![0.0; p.num_inequalities()];
        p.inequalities(&z, &mut g);
        let pt = QpPoint { z: &z, gradient: &grad, equalities: &c, inequalities: &g, lower: &lb, upper: &ub, ineq_lower: &glo, ineq_upper: &ghi };
        let h = random_hessian(&mut rng, &p.hessian_blocks());
        let mut gi = GoldfarbIdnani::new();
        let dense = crate::solver::dense_qp_step(&p, &pt, &h, &mut gi);
        let cond = p.solve_qp(&pt, &h, &mut gi);
        match (dense, cond) {
            (Ok(a), Ok(b)) => {
                let close = |x: &[f64], y: &[f64], what: &str| {
                    for (i, (u, v)) in x.iter().zip(y).enumerate() {
                        assert!((u - v).abs() <= 1e-7 * (1.0 + u.abs()), "case {case} {what}[{i}]: {u} vs {v}");
                    }
                };
                close(&a.step, &b.step, "step");
                close(&a.eq_multipliers, &b.eq_multipliers, "lambda");
                close(&a.ineq_multipliers, &b.ineq_multipliers, "mu");
                close(&a.bound_multipliers, &b.bound_multipliers, "nu");
                solved += 1;
                if a.ineq_multipliers.iter().chain(&a.bound_multipliers).any(|v| *v != 0.0) {
                    with_active += 1;
                }
            }
            (Err(a), Err(b)) => assert_eq!(a, b),
            (a, b) => panic!("case {case}: dense {a:?} vs condensed {b:?}"),
        }
    }
    assert!(solved >= 25 && with_active >= 10, "solved {solved}, with active set {with_active}");
}

#[test]
fn refine_converges_on_tracking_problem() {
    let p = problem(30, Integrator::Euler, true);
    let params = PlatformParams::default();
    let controls: Vec<_> = p.references()[..30].iter().map(|r| reference_wheel_rates(&params, r)).collect();
    let z = p.rollout(&controls).unwrap().into_vec();
    let settings = SolverSettings::refine();
    let mut st = SolverState::new(&p, z, &settings);
    let rep = solve(&p, &mut st, &settings, &mut GoldfarbIdnani::new()).unwrap();
    assert_eq!(rep.status, SolveStatus::Converged, "{rep:?}");
    let dv = DecisionVector::from_vec(30, st.primal.clone()).unwrap();
    assert_eq!(dv.state(0), p.measured_pose());
    for k in 1..30 {
        let u = dv.control(k);
        assert!(u.right >= 0.1 && u.right <= 0.8 && u.left >= 0.1 && u.left <= 0.8);
    }
}

#[test]
fn feasibility_equals_worst_defect() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = HorizonConfig { steps: 5, ..HorizonConfig::default() };
    let refs = circle_refs(5, 0.1);
    let bounds = Bounds { accel_min: WheelRates::splat(f64::NEG_INFINITY), accel_max: WheelRates::splat(f64::INFINITY), ..Bounds::default() };
    for _ in 0..20 {
        let mut z = random_z(&mut rng, 5);
        let x0 = Pose::new(z[0], z[1], z[2]);
        let u0 = WheelRates::new(z[3], z[4]);
        let p = build_nlp(cfg, Weights::default(), bounds, PlatformParams::default(), &refs, x0, u0).unwrap();
        let dv = DecisionVector::from_vec(5, z.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..5 {
            let r = shooting_defect(&cfg, &PlatformParams::default(), &dv.state(k), dv.control(k), &dv.state(k + 1));
            worst = worst.max(r.iter().fold(0.0, |a, v| a.max(v.abs())));
        }
        z.truncate(z.len());
        let st = SolverState::new(&p, z, &SolverSettings::refine());
        let kkt = kkt_residual(&p, &st).unwrap();
        assert!((kkt.primal - worst).abs() < 1e-14, "{} vs {worst}", kkt.primal);
    }
}

proptest! {
    #[test]
    fn cost_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = problem(4, Integrator::Euler, true);
        let z = random_z(&mut rng, 4);
        prop_assert!(p.objective(&z) >= 0.0);
    }

    #[test]
    fn defects_are_translation_equivariant(
        x in -5.0f64..5.0, y in -5.0f64..5.0, a in -3.0f64..3.0,
        dx in -10.0f64..10.0, dy in -10.0f64..10.0,
        ur in 0.0f64..1.0, ul in 0.0f64..1.0,
        nx in -5.0f64..5.0, ny in -5.0f64..5.0, na in -3.0f64..3.0,
    ) {
        let cfg = HorizonConfig::<f64>::default();
        let params = PlatformParams::default();
        let u = WheelRates::new(ur, ul);
        let r1 = shooting_defect(&cfg, &params, &Pose::new(x, y, a), u, &Pose::new(nx, ny, na));
        let r2 = shooting_defect(&cfg, &params, &Pose::new(x + dx, y + dy, a), u, &Pose::new(nx + dx, ny + dy, na));
        for i in 0..3 {
            prop_assert!((r1[i] - r2[i]).abs() < 1e-9);
        }
    }
}
