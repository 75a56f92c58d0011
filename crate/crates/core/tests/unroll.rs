mod common;

use common::{random_field, random_stage};
use pat_core::data::{generate_samples, PhantomSpec};
use pat_core::inn::{init_params, ArchSpec, StageParams, TensorField};
use pat_core::unroll::{
    load_plan, load_stages, make_stage_dataset, plan_digest, reconstruct, save_plan, stage_loss, stage_loss_gradient,
    train_greedy, train_stage, unrolled_step, ReconstructionPlan, SampleRecord, TrainConfig, UnrollError,
};
use pat_core::wave::{
    make_subsampled_geometry, GridSpec, NoiseSpec, SimGrid, SubsampleScheme, Traces, Volume, WaveOperator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_op() -> WaveOperator {
    let grid = SimGrid::new(GridSpec::with_courant([20, 1, 20], 1e-4, 0.5, 40).sponge(3, 0.05)).unwrap();
    let geom = make_subsampled_geometry(&grid, 2, SubsampleScheme::Total).unwrap();
    WaveOperator::new(&grid, &geom).unwrap()
}

fn toy_arch() -> ArchSpec {
    ArchSpec { channels: 4, depth: 4, hidden: 6, squeeze_after: Some(1), kernel: 3 }
}

fn toy_samples(op: &WaveOperator, n: usize) -> Vec<(Volume, Traces)> {
    let spec = PhantomSpec { radius_range: (1.0, 2.0), n_vessels: 2, ..Default::default() };
    generate_samples(op, &NoiseSpec { snr_db: 10.0, seed: 8 }, &spec, 0, n).unwrap()
}

fn random_volume(op: &WaveOperator, rng: &mut impl Rng) -> Volume {
    Volume::for_grid(op.grid(), (0..op.grid().n_points()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn identity_stage_passes_state_through() {
    let op = toy_op();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_volume(&op, &mut rng);
    let s: TensorField<f64> = random_field(3, op.grid().dims(), &mut rng);
    let y = op.forward(&random_volume(&op, &mut rng)).unwrap();
    let stage = init_params::<f64>(&toy_arch(), true, 0).unwrap();
    let before = op.counter().snapshot();
    let out = unrolled_step(&op, &x, &s, &y, &stage).unwrap();
    let spent = op.counter().snapshot().since(before);
    assert_eq!((spent.forward, spent.adjoint), (1, 1));
    assert!(bits_eq(out.x.values(), x.values()));
    assert_eq!(out.s, s);
}

#[test]
fn identity_plan_returns_zero_and_constant_misfit() {
    let op = toy_op();
    let (_, y) = toy_samples(&op, 1).pop().unwrap();
    let half_norm = 0.5 * y.norm().powi(2);
    for k in [1usize, 3] {
        let stages = (0..k).map(|i| init_params::<f64>(&toy_arch(), true, i as u64).unwrap()).collect();
        let plan = ReconstructionPlan::new(stages).unwrap();
        let r = reconstruct(&op, &y, &plan).unwrap();
        assert!(r.x.values().iter().all(|&v| v == 0.0));
        assert_eq!(r.solves.total(), 2 * k as u64);
        assert_eq!(r.misfits.len(), k);
        for m in r.misfits {
            assert!((m - half_norm).abs() <= 1e-12 * half_norm);
        }
    }
}

#[test]
fn trained_stage_depends_on_data() {
    let op = toy_op();
    let samples = toy_samples(&op, 2);
    let plan = ReconstructionPlan::new(vec![random_stage(&toy_arch(), true, 3, 0.5)]).unwrap();
    let a = reconstruct(&op, &samples[0].1, &plan).unwrap();
    let b = reconstruct(&op, &samples[1].1, &plan).unwrap();
    assert_ne!(a.x, b.x);
    assert!(a.x.values().iter().any(|&v| v != 0.0));
}

#[test]
fn stage_dataset_accounting_and_reproducibility() {
    let op = toy_op();
    let samples = toy_samples(&op, 3);
    let arch = toy_arch();
    let before = op.counter().snapshot();
    let r0 = make_stage_dataset::<f64>(&op, &samples, &[], &arch).unwrap();
    assert_eq!(op.counter().snapshot().since(before).total(), 6);
    for (rec, (gt, y)) in r0.iter().zip(&samples) {
        assert!(rec.x.values().iter().all(|&v| v == 0.0));
        assert!(rec.s.data().iter().all(|&v| v == 0.0));
        assert_eq!(&rec.ground_truth, gt);
        let want = op.adjoint(y).unwrap().scaled(-1.0);
        assert!(bits_eq(rec.g.values(), want.values()));
        assert_eq!(rec.provenance.stage, 0);
        assert_eq!(rec.provenance.solves, 2);
    }

    let frozen = vec![random_stage(&arch, true, 4, 0.5)];
    let before = op.counter().snapshot();
    let r1 = make_stage_dataset(&op, &samples, &frozen, &arch).unwrap();
    assert_eq!(op.counter().snapshot().since(before).total(), 12);
    let again = make_stage_dataset(&op, &samples, &frozen, &arch).unwrap();
    assert_eq!(r1, again);
    assert!(r1.iter().all(|r| r.provenance.stage == 1 && r.provenance.solves == 4));
}

fn records(n: usize) -> (WaveOperator, Vec<SampleRecord>) {
    let op = toy_op();
    let samples = toy_samples(&op, n);
    let recs = make_stage_dataset::<f64>(&op, &samples, &[], &toy_arch()).unwrap();
    (op, recs)
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let (_, recs) = records(2);
    let init = init_params::<f32>(&toy_arch(), true, 2).unwrap();
    let cfg = TrainConfig { epochs_per_stage: 0, calibrate_conditioning: false, ..Default::default() };
    let out = train_stage(&recs, init.clone(), &cfg, 0).unwrap();
    assert_eq!(out.stage, init);
    assert!(out.history.is_empty());
}

#[test]
fn identity_loss_is_direct_mse() {
    let (_, recs) = records(4);
    let stage = init_params::<f64>(&toy_arch(), true, 2).unwrap();
    let mut want = 0.0;
    for r in &recs {
        let d: f64 = r.x.values().iter().zip(r.ground_truth.values()).map(|(a, b)| (a - b).powi(2)).sum();
        want += d / r.x.values().len() as f64;
    }
    want /= recs.len() as f64;
    let got = stage_loss(&recs, &stage).unwrap();
    assert!((got - want).abs() <= 1e-14 * want, "{got} vs {want}");
}

#[test]
fn training_makes_progress() {
    let (_, recs) = records(10);
    let mut improved = 0;
    for seed in 0..3 {
        let cfg = TrainConfig { epochs_per_stage: 12, batch_size: 2, learning_rate: 3e-3, seed, ..Default::default() };
        let init = init_params::<f32>(&toy_arch(), true, seed).unwrap();
        let out = train_stage(&recs, init, &cfg, 0).unwrap();
        assert_eq!(out.history.len(), 12);
        if out.history.last().unwrap().mean_loss < out.history[0].mean_loss {
            improved += 1;
        }
    }
    assert!(improved >= 2, "only {improved} of 3 seeds improved");
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (_, recs) = records(6);
    let cfg = TrainConfig { epochs_per_stage: 3, batch_size: 3, seed: 11, ..Default::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_stage(&recs, init_params::<f32>(&toy_arch(), true, 5).unwrap(), &cfg, 0).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(plan_digest(std::slice::from_ref(&a.stage)), plan_digest(std::slice::from_ref(&b.stage)));
    assert_eq!(a.stage, b.stage);
    let la: Vec<u64> = a.history.iter().map(|h| h.mean_loss.to_bits()).collect();
    let lb: Vec<u64> = b.history.iter().map(|h| h.mean_loss.to_bits()).collect();
    assert_eq!(la, lb);
}

#[test]
fn greedy_training_freezes_earlier_stages() {
    let op = toy_op();
    let samples = toy_samples(&op, 4);
    let cfg = TrainConfig { epochs_per_stage: 2, batch_size: 2, ..Default::default() };
    let mut snapshots: Vec<Vec<StageParams<f32>>> = Vec::new();
    let mut epochs_logged = Vec::new();
    let plan = train_greedy(&op, &samples, &toy_arch(), true, 3, &cfg, Vec::new(), |i, done, hist| {
        assert_eq!(done.len(), i + 1);
        snapshots.push(done.to_vec());
        epochs_logged.push(hist.len());
        Ok(())
    })
    .unwrap();
    assert_eq!(plan.n_stages(), 3);
    assert_eq!(epochs_logged, vec![2, 2, 2]);
    for (i, snap) in snapshots.iter().enumerate() {
        for (j, st) in snap.iter().enumerate().take(i + 1) {
            assert_eq!(plan_digest(std::slice::from_ref(st)), plan_digest(&[plan.stages[j].clone()]));
        }
    }

    // resuming from the first two stages reproduces the third
    let resumed =
        train_greedy(&op, &samples, &toy_arch(), true, 3, &cfg, plan.stages[..2].to_vec(), |_, _, _| Ok(())).unwrap();
    assert_eq!(resumed, plan);
}

fn directional_check<T: pat_core::inn::Real>(recs: &[SampleRecord], stage: &StageParams<T>, tol: f64) {
    let (_, grad) = stage_loss_gradient(recs, stage).unwrap();
    let base: StageParams<f64> = stage.cast();
    let flat = base.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // small enough that no leaky-ReLU kink is crossed
    let h = 1e-7;
    for _ in 0..6 {
        let d: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = |t: f64| {
            let mut p = base.clone();
            p.load_flat(&flat.iter().zip(&d).map(|(a, b)| a + t * b).collect::<Vec<_>>()).unwrap();
            stage_loss(recs, &p).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rel = (fd - an).abs() / fd.abs().max(1e-300);
        assert!(rel < tol, "directional derivative {an} vs finite difference {fd}: rel {rel}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (_, recs) = records(3);
    let mut stage = random_stage(&toy_arch(), true, 21, 0.5);
    stage.cond_scale = pat_core::unroll::conditioning_scale(&recs);
    directional_check(&recs, &stage, 1e-6);
    let single: StageParams<f32> = stage.cast();
    directional_check(&recs, &single, 1e-4);
}

#[test]
fn non_finite_loss_aborts() {
    let (_, mut recs) = records(2);
    recs[1].ground_truth.values_mut()[5] = f64::NAN;
    let cfg = TrainConfig { epochs_per_stage: 1, batch_size: 1, ..Default::default() };
    let r = train_stage(&recs, init_params::<f32>(&toy_arch(), true, 0).unwrap(), &cfg, 0);
    assert!(matches!(r, Err(UnrollError::NonFinite { sample: 1, .. })), "{r:?}");
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let stages: Vec<StageParams<f32>> = (0..2).map(|i| random_stage(&toy_arch(), true, i, 0.5).cast()).collect();
    let m = save_plan(dir.path(), &stages).unwrap();
    assert_eq!(m.stages.len(), 2);
    let plan: ReconstructionPlan<f32> = load_plan(dir.path()).unwrap();
    assert_eq!(plan.stages, stages);

    let empty = tempfile::tempdir().unwrap();
    let (manifest, none) = load_stages::<f32>(empty.path()).unwrap();
    assert!(manifest.is_none() && none.is_empty());
    assert!(load_plan::<f32>(empty.path()).is_err());

    let p = dir.path().join("stage_1.f64");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(load_plan::<f32>(dir.path()).is_err());
}
