//! Receding-horizon warm start for shooting-layout states.

use super::SolverState;
use crate::scalar::Real;
use crate::se2::Pose;

/// Shifts a shooting-layout solution (`5N+3` primal entries, see
/// [`crate::ocp`]) earlier by `shift` nodes. Fractional shifts interpolate
/// linearly between neighbouring nodes; indices past the end repeat the last
/// entry. `tail`, when given, overwrites the final state. Multipliers move
/// with the nodes they belong to and the Hessian approximation is kept.
pub fn warm_start_shift<T: Real>(state: &mut SolverState<T>, shift: T, tail: Option<Pose<T>>) {
    let len = state.primal.len();
    assert!(len >= 8 && (len - 3) % 5 == 0, "primal length {len} is not a shooting layout");
    assert!(shift >= T::zero() && shift.is_finite(), "shift must be finite and non-negative");
    let n = (len - 3) / 5;
    let whole = shift.floor();
    let frac = shift - whole;
    let offset = whole.to_usize().unwrap_or(usize::MAX);

    // value of node `k + shift` in a sequence of `count` nodes
    let sample = |count: usize, k: usize, get: &dyn Fn(usize) -> T| -> T {
        let last = count - 1;
        let i0 = k.saturating_add(offset);
        if i0 >= last {
            return get(last);
        }
        let a = get(i0);
        if frac == T::zero() {
            return a;
        }
        a + (get(i0 + 1) - a) * frac
    };

    let old = state.primal.clone();
    for k in 0..=n {
        for i in 0..3 {
            state.primal[5 * k + i] = sample(n + 1, k, &|j| old[5 * j + i]);
        }
        if k < n {
            for j in 0..2 {
                state.primal[5 * k + 3 + j] = sample(n, k, &|m| old[5 * m + 3 + j]);
            }
        }
    }
    if let Some(p) = tail {
        state.primal[5 * n..5 * n + 3].copy_from_slice(&p.to_vector());
    }

    let old = state.bound_multipliers.clone();
    if old.len() == len {
        for k in 0..=n {
            for i in 0..3 {
                state.bound_multipliers[5 * k + i] = sample(n + 1, k, &|j| old[5 * j + i]);
            }
            if k < n {
                for j in 0..2 {
                    state.bound_multipliers[5 * k + 3 + j] = sample(n, k, &|m| old[5 * m + 3 + j]);
                }
            }
        }
    }
    let old = state.eq_multipliers.clone();
    if old.len() == 3 * n + 5 {
        for k in 0..n {
            for i in 0..3 {
                state.eq_multipliers[5 + 3 * k + i] = sample(n, k, &|j| old[5 + 3 * j + i]);
            }
        }
    }
    let old = state.ineq_multipliers.clone();
    if n >= 2 && old.len() == 2 * (n - 1) {
        for k in 0..n - 1 {
            for j in 0..2 {
                state.ineq_multipliers[2 * k + j] = sample(n - 1, k, &|m| old[2 * m + j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{BlockHessian, KktResidual};

    fn state(n: usize) -> SolverState<f64> {
        let len = 5 * n + 3;
        let sizes = if n == 1 { vec![8] } else { let mut v = vec![5; n - 1]; v.push(8); v };
        SolverState {
            primal: (0..len).map(|i| i as f64).collect(),
            eq_multipliers: (0..3 * n + 5).map(|i| i as f64).collect(),
            ineq_multipliers: (0..2 * n.saturating_sub(1)).map(|i| i as f64).collect(),
            bound_multipliers: (0..len).map(|i| -(i as f64)).collect(),
            hessian: BlockHessian::new(&sizes, 3.0),
            penalty: 1.0,
            kkt: KktResidual::default(),
            total_qp_solves: 0,
            hessian_resets: 0,
        }
    }

    fn controls(s: &SolverState<f64>) -> Vec<[f64; 2]> {
        let n = (s.primal.len() - 3) / 5;
        (0..n).map(|k| [s.primal[5 * k + 3], s.primal[5 * k + 4]]).collect()
    }

    #[test]
    fn controls_shift_and_repeat_last() {
        let mut s = state(4);
        let before = controls(&s);
        let hessian = s.hessian.clone();
        warm_start_shift(&mut s, 1.0, None);
        let after = controls(&s);
        assert_eq!(after, vec![before[1], before[2], before[3], before[3]]);
        assert_eq!(s.hessian, hessian);
        // defect multipliers shift too, pinning rows stay
        assert_eq!(&s.eq_multipliers[..5], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.eq_multipliers[5], 8.0);
        assert_eq!(s.ineq_multipliers, vec![2.0, 3.0, 4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn two_single_shifts_equal_one_double() {
        let mut a = state(6);
        let mut b = a.clone();
        warm_start_shift(&mut a, 1.0, None);
        warm_start_shift(&mut a, 1.0, None);
        warm_start_shift(&mut b, 2.0, None);
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_horizon() {
        let mut s = state(1);
        warm_start_shift(&mut s, 1.0, Some(Pose::new(9.0, 8.0, 7.0)));
        assert_eq!(s.primal, vec![5.0, 6.0, 7.0, 3.0, 4.0, 9.0, 8.0, 7.0]);
    }

    #[test]
    fn fractional_shift_interpolates() {
        let mut s = state(3);
        warm_start_shift(&mut s, 0.25, None);
        assert!((s.primal[0] - 1.25).abs() < 1e-12);
        assert!((s.primal[3] - 4.25).abs() < 1e-12);
        // last control and state are held
        assert_eq!(s.primal[13], 13.0);
        assert_eq!(s.primal[15], 15.0);
    }
}
