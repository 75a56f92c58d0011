use pat_core::data::{
    export_pgm, gen_phantom, generate_samples, load_dataset, mip, mse, psnr, read_pgm, simulate_dataset, slice, Axis,
    DataError, Image, Normalization, PhantomSpec,
};
use pat_core::wave::{make_subsampled_geometry, GridSpec, NoiseSpec, SimGrid, SubsampleScheme, Volume, WaveOperator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid64() -> SimGrid {
    SimGrid::new(GridSpec::with_courant([64, 1, 64], 1e-4, 0.5, 128)).unwrap()
}

fn tiny_grid() -> SimGrid {
    SimGrid::new(GridSpec::with_courant([24, 1, 24], 1e-4, 0.5, 32).sponge(4, 0.05)).unwrap()
}

#[test]
fn phantom_statistics_over_seeds() {
    let g = grid64();
    let spec = PhantomSpec::default();
    for seed in 0..20 {
        let v = gen_phantom(&g, &spec.with_seed(seed)).unwrap();
        let vals = v.values();
        assert!(vals.iter().all(|&x| x >= 0.0));
        let max = vals.iter().copied().fold(0.0, f64::max);
        assert!(max >= spec.intensity_range.0 && max <= spec.intensity_range.1, "seed {seed}: max {max}");
        let frac = vals.iter().filter(|&&x| x > 0.0).count() as f64 / vals.len() as f64;
        assert!(frac > 0.0 && frac < 0.5, "seed {seed}: nonzero fraction {frac}");
    }
}

#[test]
fn single_sample_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = tiny_grid();
    let geom = make_subsampled_geometry(&g, 4, SubsampleScheme::Total).unwrap();
    let noise = NoiseSpec { snr_db: 10.0, seed: 3 };
    let spec = PhantomSpec { radius_range: (1.0, 1.5), ..Default::default() }.with_seed(5);
    let m = simulate_dataset(1, &g, &geom, &noise, &spec, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 1);
    assert_eq!(m.forward_solves, 1);
    assert_eq!(m.noise.snr_db, 10.0);
    assert_eq!(m.geometry.subsample_factor, 4);
    assert_eq!(m.geometry.scheme, SubsampleScheme::Total);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 5, "{files:?}");

    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    let op = WaveOperator::new(&g, &geom).unwrap();
    let want = generate_samples(&op, &noise, &spec, 0, 1).unwrap();
    for ((a, b), (c, d)) in ds.samples.iter().zip(&want) {
        assert!(a.values().iter().zip(c.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b.values().iter().zip(d.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn repeated_simulation_is_identical() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let g = tiny_grid();
    let geom = make_subsampled_geometry(&g, 2, SubsampleScheme::Total).unwrap();
    let noise = NoiseSpec { snr_db: 10.0, seed: 1 };
    let spec = PhantomSpec { radius_range: (1.0, 1.5), ..Default::default() };
    let a = simulate_dataset(3, &g, &geom, &noise, &spec, d1.path()).unwrap();
    let b = simulate_dataset(3, &g, &geom, &noise, &spec, d2.path()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.forward_solves, 3);
}

#[test]
fn single_bit_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let g = tiny_grid();
    let geom = make_subsampled_geometry(&g, 1, SubsampleScheme::Total).unwrap();
    let spec = PhantomSpec { radius_range: (1.0, 1.5), ..Default::default() };
    let m = simulate_dataset(2, &g, &geom, &NoiseSpec { snr_db: 10.0, seed: 0 }, &spec, dir.path()).unwrap();
    let p = dir.path().join(&m.samples[1].traces.file);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[17] ^= 0x04;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Checksum { .. })));
}

#[test]
fn missing_output_dir_is_an_io_error() {
    let g = tiny_grid();
    let geom = make_subsampled_geometry(&g, 1, SubsampleScheme::Total).unwrap();
    let r = simulate_dataset(
        1,
        &g,
        &geom,
        &NoiseSpec { snr_db: 10.0, seed: 0 },
        &PhantomSpec::default(),
        std::path::Path::new("/nonexistent/dataset"),
    );
    assert!(matches!(r, Err(DataError::Io { .. })));
}

#[test]
fn metrics_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let dims = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6)];
        let n = dims.iter().product::<usize>();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..n {
            let d = a[i] - b[i];
            acc += d * d;
        }
        let want = acc / n as f64;
        let (va, vb) = (Volume::from_vec(dims, a).unwrap(), Volume::from_vec(dims, b).unwrap());
        assert!((mse(&va, &vb).unwrap() - want).abs() < 1e-12);
        let want_psnr = 20.0 * 2.0f64.log10() - 10.0 * want.log10();
        assert!((psnr(&va, &vb, 2.0).unwrap() - want_psnr).abs() < 1e-12);
    }
}

#[test]
fn projections_of_simple_volumes() {
    let c = Volume::from_vec([3, 4, 5], vec![0.25; 60]).unwrap();
    for axis in Axis::ALL {
        assert!(mip(&c, axis).data.iter().all(|&v| v == 0.25));
    }
    let mut vals = vec![0.0; 60];
    vals[(2 * 4 + 1) * 5 + 3] = 0.8; // voxel (2, 1, 3)
    let v = Volume::from_vec([3, 4, 5], vals).unwrap();
    for (axis, (r, col)) in [(Axis::X, (1, 3)), (Axis::Y, (2, 3)), (Axis::Z, (2, 1))] {
        let img = mip(&v, axis);
        assert_eq!(img.data.iter().filter(|&&p| p != 0.0).count(), 1);
        assert_eq!(img.get(r, col), 0.8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn projection_dominates_slices(seed in any::<u64>(), nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [nx, ny, nz];
        let v = Volume::from_vec(dims, (0..nx * ny * nz).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for (a, axis) in Axis::ALL.into_iter().enumerate() {
            let m = mip(&v, axis);
            for k in 0..dims[a] {
                let s = slice(&v, axis, k).unwrap();
                prop_assert!(m.data.iter().zip(&s.data).all(|(p, q)| p >= q));
            }
        }
    }
}

#[test]
fn pgm_quantization_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.pgm");
    let img = Image { rows: 2, cols: 2, data: vec![0.0, 1.0, 0.5, 1.0] };
    let q = export_pgm(&img, &p, Normalization::Fixed(1.0)).unwrap();
    assert_eq!(q, vec![0, 65535, 32768, 65535]);
    let (rows, cols, back) = read_pgm(&p).unwrap();
    assert_eq!((rows, cols), (2, 2));
    assert_eq!(back, q);
    let side = std::fs::read_to_string(dir.path().join("a.pgm.txt")).unwrap();
    assert!(side.starts_with("normalization fixed"));

    let flat = Image { rows: 3, cols: 2, data: vec![0.7; 6] };
    let p2 = dir.path().join("b.pgm");
    assert_eq!(export_pgm(&flat, &p2, Normalization::Minmax).unwrap(), vec![0; 6]);
    assert_eq!(read_pgm(&p2).unwrap(), (3, 2, vec![0; 6]));

    let bad = Image { rows: 1, cols: 1, data: vec![f64::NAN] };
    assert!(export_pgm(&bad, &dir.path().join("c.pgm"), Normalization::Minmax).is_err());
}
