//! RK4 checked against exact solutions and a conserved quantity.

use mscale::dynamics::{integrate, rk4_step, FnField, SystemKind, SystemSpec};

fn decay_error_at_one(dt: f64) -> f64 {
    let steps = (1.0 / dt).round() as usize;
    let mut f = FnField(|s: &[f64]| Ok(vec![-s[0]]));
    let traj = integrate(&mut f, &[1.0], dt, steps).unwrap();
    (traj.final_state()[0] - (-1.0f64).exp()).abs()
}

#[test]
fn global_order_is_four() {
    let dts = [0.2, 0.1, 0.05, 0.025];
    let errors: Vec<f64> = dts.iter().map(|&dt| decay_error_at_one(dt)).collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((14.0..=18.0).contains(&ratio), "error ratio {ratio}");
        let order = ratio.log2();
        assert!((3.8..=4.2).contains(&order), "order {order}");
    }
}

#[test]
fn local_error_shrinks_with_fifth_power() {
    let mut f = FnField(|s: &[f64]| Ok(vec![-s[0]]));
    let coarse = (rk4_step(&mut f, &[1.0], 0.1).unwrap()[0] - (-0.1f64).exp()).abs();
    let fine = (rk4_step(&mut f, &[1.0], 0.05).unwrap()[0] - (-0.05f64).exp()).abs();
    let ratio = coarse / fine;
    assert!((28.0..=36.0).contains(&ratio), "local error ratio {ratio}");
}

#[test]
fn pendulum_energy_is_conserved() {
    let spec = SystemSpec::<f64>::new(SystemKind::Pendulum);
    let energy = |s: &[f64]| 0.5 * s[1] * s[1] - s[0].cos();
    for x0 in [[0.5, 0.0], [1.0, 0.5], [-2.0, 1.0], [2.5, -0.3]] {
        let mut field = spec.clone();
        let traj = integrate(&mut field, &x0, 0.01, 1000).unwrap();
        let e0 = energy(&x0);
        let drift = traj.states.iter().map(|s| (energy(s) - e0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "energy drift {drift} from {x0:?}");
    }
}

#[test]
fn duffing_energy_is_conserved() {
    let spec = SystemSpec::<f64>::new(SystemKind::Duffing);
    let energy = |s: &[f64]| 0.5 * s[1] * s[1] - 0.5 * s[0] * s[0] + 0.25 * s[0].powi(4);
    let mut field = spec.clone();
    let traj = integrate(&mut field, &[0.5, 0.5], 0.01, 1000).unwrap();
    let e0 = energy(&[0.5, 0.5]);
    assert!(traj.states.iter().all(|s| (energy(s) - e0).abs() < 1e-6));
}

#[test]
fn times_are_uniform_and_increasing() {
    let mut f = FnField(|s: &[f64]| Ok(vec![s[0].cos()]));
    let traj = integrate(&mut f, &[0.0], 0.05, 40).unwrap();
    assert_eq!(traj.times.len(), traj.states.len());
    assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    assert!((traj.times[40] - 2.0).abs() < 1e-12);
}
