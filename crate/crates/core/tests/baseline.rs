mod common;

use common::{normal_equations, Dense};
use pat_core::baseline::{lsqr, lsqr_wave, LsqrOptions, StopReason};
use pat_core::wave::{
    make_subsampled_geometry, GridSpec, LinearOperator, SimGrid, SubsampleScheme, Traces, Volume, WaveOperator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_system_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..5 {
        let m = Dense { rows: 20, cols: 10, a: (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = lsqr(&m, &b, &LsqrOptions { max_iters: 25, ..Default::default() });
        let want = normal_equations(&m, &b);
        let err = r.x.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / scale < 1e-8, "relative error {}", err / scale);
        assert!(r.residual_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn consistent_system_is_solved_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = Dense { rows: 12, cols: 6, a: (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let x_true: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut b = vec![0.0; 12];
    m.apply(&x_true, &mut b);
    let r = lsqr(&m, &b, &LsqrOptions::default());
    assert!(r.x.iter().zip(&x_true).all(|(a, b)| (a - b).abs() < 1e-8));
    assert!(matches!(r.stop, StopReason::ResidualTolerance | StopReason::LeastSquaresTolerance | StopReason::Breakdown));
}

fn toy_problem() -> (WaveOperator, Traces) {
    let grid = SimGrid::new(GridSpec::with_courant([32, 1, 32], 1e-4, 0.5, 64).sponge(4, 0.05)).unwrap();
    let geom = make_subsampled_geometry(&grid, 4, SubsampleScheme::Total).unwrap();
    let op = WaveOperator::new(&grid, &geom).unwrap();
    let mut x = Volume::zeros(&grid);
    for i in 10..20 {
        x.values_mut()[grid.index(i, 0, 14)] = 1.0;
        x.values_mut()[grid.index(16, 0, i)] = 0.7;
    }
    let y = op.forward(&x).unwrap();
    (op, y)
}

#[test]
fn wave_lsqr_accounting_and_monotone_residuals() {
    let (op, y) = toy_problem();
    let out = lsqr_wave(&op, &y, &LsqrOptions::fixed(30)).unwrap();
    assert_eq!(out.result.iterations, 30);
    assert_eq!(out.solves.forward, 30);
    assert_eq!(out.solves.adjoint, 31);
    assert_eq!(out.solves.total(), 61);
    assert_eq!(out.body_solves(), 60);
    let h = &out.result.residual_history;
    assert_eq!(h.len(), 31);
    assert!(h.windows(2).all(|w| w[1] <= w[0]));
    assert!(h[30] < h[1]);
}

#[test]
fn zero_traces_give_zero_volume() {
    let (op, y) = toy_problem();
    let zero = Traces::zeros(y.geometry(), y.nt());
    let out = lsqr_wave(&op, &zero, &LsqrOptions::fixed(5)).unwrap();
    assert!(out.volume.values().iter().all(|&v| v == 0.0));
    assert_eq!(out.solves.total(), 0);
}
