//! Self-checks with measured numbers: adjoint dot test, stage round trip,
//! misfit-gradient finite differences, and the constant-memory depth sweep.

use pat_core::inn::{init_params, stage_backward, stage_forward, stage_inverse, ArchSpec, InnState, StageParams, TensorField};
use pat_core::wave::{make_subsampled_geometry, SubsampleScheme, Traces, Volume, WaveOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Resolved, RunConfig};
use crate::error::CliError;

const DOT_TOL: f64 = 1e-12;
const ROUND_TRIP_TOL: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-6;
const SWEEP_DEPTHS: [usize; 2] = [4, 64];

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn random_volume(op: &WaveOperator, rng: &mut ChaCha8Rng) -> Volume {
    Volume::for_grid(op.grid(), (0..op.grid().n_points()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("grid-sized")
}

fn random_traces(op: &WaveOperator, rng: &mut ChaCha8Rng) -> Traces {
    let n = op.geometry().n_active() * op.grid().nt();
    Traces::from_vec(op.geometry(), op.grid().nt(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("geometry-sized")
}

fn dot_test(op: &WaveOperator, draws: usize, rng: &mut ChaCha8Rng) -> Result<f64, CliError> {
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let x = random_volume(op, rng);
        let y = random_traces(op, rng);
        let ax = op.forward(&x)?;
        let lhs = ax.dot(&y);
        let rhs = x.dot(&op.adjoint(&y)?);
        // normalized by the Cauchy-Schwarz bound, |<Ax,y>| alone can be tiny for random draws
        worst = worst.max((lhs - rhs).abs() / (ax.norm() * y.norm()).max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn gradient_check(op: &WaveOperator, rng: &mut ChaCha8Rng) -> Result<f64, CliError> {
    let x_true = random_volume(op, rng);
    let y = op.forward(&x_true)?;
    let x = random_volume(op, rng).scaled(0.5);
    let (_, g) = op.misfit_and_gradient(&x, &y)?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let d = random_volume(op, rng);
        let h = 1e-3;
        let at = |t: f64| -> Result<f64, CliError> {
            let p = Volume::for_grid(op.grid(), x.values().iter().zip(d.values()).map(|(a, b)| a + t * b).collect())?;
            let r = op.forward(&p)?;
            Ok(0.5 * r.values().iter().zip(y.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        };
        // the misfit is quadratic, so the central difference is exact up to rounding
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let an = g.dot(&d);
        worst = worst.max((fd - an).abs() / fd.abs().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn test_dims(two_d: bool) -> [usize; 3] {
    if two_d {
        [16, 1, 16]
    } else {
        [8, 8, 8]
    }
}

fn randomized(arch: &ArchSpec, two_d: bool, seed: u64) -> Result<StageParams<f64>, CliError> {
    let mut p = init_params::<f64>(arch, two_d, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a6);
    for layer in &mut p.layers {
        let fan_in = (layer.conv2.in_channels * layer.conv2.extent.iter().product::<usize>()) as f64;
        let bound = 0.5 * (6.0 / fan_in).sqrt();
        layer.conv2.weights.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
    }
    Ok(p)
}

fn random_field(channels: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> TensorField<f64> {
    let n = channels * dims.iter().product::<usize>();
    TensorField::from_vec(channels, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn round_trip(arch: &ArchSpec, two_d: bool, rng: &mut ChaCha8Rng) -> Result<f64, CliError> {
    let dims = test_dims(two_d);
    let p = randomized(arch, two_d, rng.gen())?;
    let state = InnState::from_field(random_field(arch.channels, dims, rng))?;
    let g = random_field(1, dims, rng);
    let out = stage_forward(&state, &g, &p, None)?;
    let back = stage_inverse(&out, &g, &p)?;
    Ok(back.field().max_abs_diff(state.field()))
}

fn memory_sweep(arch: &ArchSpec, two_d: bool, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>, CliError> {
    let dims = test_dims(two_d);
    let mut rows = Vec::new();
    for depth in SWEEP_DEPTHS {
        let a = ArchSpec { depth, squeeze_after: arch.squeeze_after.map(|_| 1), ..arch.clone() };
        let p = randomized(&a, two_d, 7)?;
        let state = InnState::from_field(random_field(a.channels, dims, rng))?;
        let g = random_field(1, dims, rng);
        let out = stage_forward(&state, &g, &p, None)?;
        let dy = random_field(a.channels, dims, rng);
        let b = stage_backward(&out, &dy, &g, &p)?;
        rows.push((depth, b.stats.peak_cached_tensors, b.stats.peak_cached_scalars));
    }
    Ok(rows)
}

pub fn run(cfg: &RunConfig, r: &Resolved, sabotage: bool) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let two_d = r.grid.is_2d();
    let mut checks = Vec::new();

    let wrap = |op: WaveOperator| if sabotage { op.sabotaged() } else { op };
    let full = wrap(WaveOperator::new(&r.grid, &make_subsampled_geometry(&r.grid, 1, SubsampleScheme::Total)?)?);
    let sub = wrap(WaveOperator::new(&r.grid, &r.geometry)?);
    for (name, op) in [("adjoint dot test (full array)", &full), ("adjoint dot test (configured array)", &sub)] {
        let e = dot_test(op, 3, &mut rng)?;
        checks.push(Check { name, pass: e < DOT_TOL, detail: format!("max |<Ax,y> - <x,A^T y>| / (|Ax| |y|) {e:.3e} (tol {DOT_TOL:.0e})") });
    }

    let e = round_trip(&cfg.arch, two_d, &mut rng)?;
    checks.push(Check {
        name: "stage round trip",
        pass: e < ROUND_TRIP_TOL,
        detail: format!("max abs error {e:.3e} at depth {} (tol {ROUND_TRIP_TOL:.0e})", cfg.arch.depth),
    });

    let e = gradient_check(&sub, &mut rng)?;
    checks.push(Check {
        name: "misfit gradient vs finite differences",
        pass: e < GRADIENT_TOL,
        detail: format!("max relative error {e:.3e} (tol {GRADIENT_TOL:.0e})"),
    });

    let rows = memory_sweep(&cfg.arch, two_d, &mut rng)?;
    let same = rows.windows(2).all(|w| w[0].1 == w[1].1);
    let growth = rows.last().expect("sweep").2 as f64 / rows[0].2 as f64 - 1.0;
    let detail = rows
        .iter()
        .map(|(d, t, s)| format!("depth {d}: peak_cached_tensors {t}, peak_cached_scalars {s}"))
        .collect::<Vec<_>>()
        .join("; ");
    checks.push(Check {
        name: "constant-memory backward",
        pass: same && growth < 0.05,
        detail: format!("{detail}; scalar growth {:.2}%", 100.0 * growth),
    });

    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.pass);
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
