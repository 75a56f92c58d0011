//! Simulated datasets: phantom, forward solve on the subsampled array, noise;
//! persisted as per-sample arrays plus a checksummed manifest.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{read_traces, read_volume, verify_checksum, write_atomic, write_traces, write_volume};
use super::phantom::{gen_phantom, PhantomSpec};
use super::{io_err, DataError, Result};
use crate::wave::{
    add_noise, make_subsampled_geometry, NoiseSpec, ReceiverGeometry, SimGrid, SubsampleScheme, Traces, Volume,
    WaveOperator,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryRecord {
    pub subsample_factor: usize,
    pub scheme: SubsampleScheme,
    pub n_active: usize,
    pub plane_z: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: usize,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub ground_truth: FileEntry,
    pub traces: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub grid: crate::wave::GridSpec,
    pub geometry: GeometryRecord,
    /// Base noise spec; sample `k` uses `derive_seed(noise.seed, k)`.
    pub noise: NoiseSpec,
    /// Base phantom spec; sample `k` uses `derive_seed(phantom.seed, k)`.
    pub phantom: PhantomSpec,
    pub n_samples: usize,
    pub samples: Vec<SampleEntry>,
    pub forward_solves: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub grid: SimGrid,
    pub geometry: ReceiverGeometry,
    /// (ground truth, noisy traces) per sample.
    pub samples: Vec<(Volume, Traces)>,
}

/// Decorrelated per-sample seed (SplitMix64 finalizer over `base + k`).
pub fn derive_seed(base: u64, k: u64) -> u64 {
    let mut z = base.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-memory samples `offset..offset + n`; one forward solve each, computed
/// in parallel on the current rayon pool.
pub fn generate_samples(
    op: &WaveOperator,
    noise: &NoiseSpec,
    spec: &PhantomSpec,
    offset: usize,
    n: usize,
) -> Result<Vec<(Volume, Traces)>> {
    (offset..offset + n)
        .into_par_iter()
        .map(|k| {
            let gt = gen_phantom(op.grid(), &spec.with_seed(derive_seed(spec.seed, k as u64)))?;
            let clean = op.forward(&gt)?;
            let noisy = add_noise(&clean, &NoiseSpec { snr_db: noise.snr_db, seed: derive_seed(noise.seed, k as u64) })?;
            Ok((gt, noisy))
        })
        .collect()
}

fn gt_name(k: usize) -> String {
    format!("sample_{k}_gt.f64")
}

fn traces_name(k: usize) -> String {
    format!("sample_{k}_traces.f64")
}

/// Simulates `n` samples into an existing directory. The manifest is written
/// last, atomically.
pub fn simulate_dataset(
    n: usize,
    grid: &SimGrid,
    geometry: &ReceiverGeometry,
    noise: &NoiseSpec,
    spec: &PhantomSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if !out_dir.is_dir() {
        return Err(DataError::Io {
            path: out_dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    spec.validate()?;
    let op = WaveOperator::new(grid, geometry)?;
    let samples = generate_samples(&op, noise, spec, 0, n)?;
    let forward_solves = op.counter().forward_count();

    let entries = samples
        .par_iter()
        .enumerate()
        .map(|(k, (gt, tr))| {
            let (gname, tname) = (gt_name(k), traces_name(k));
            let gsum = write_volume(&out_dir.join(&gname), gt)?;
            let tsum = write_traces(&out_dir.join(&tname), tr)?;
            Ok(SampleEntry {
                id: k,
                phantom_seed: derive_seed(spec.seed, k as u64),
                noise_seed: derive_seed(noise.seed, k as u64),
                ground_truth: FileEntry { file: gname, sha256: gsum },
                traces: FileEntry { file: tname, sha256: tsum },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        grid: grid.spec().clone(),
        geometry: GeometryRecord {
            subsample_factor: geometry.subsample_factor(),
            scheme: geometry.scheme(),
            n_active: geometry.n_active(),
            plane_z: geometry.plane_z(),
        },
        noise: *noise,
        phantom: spec.clone(),
        n_samples: n,
        samples: entries,
        forward_solves,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| DataError::Json { path: path.clone(), source })?;
    write_atomic(&path, &json)?;
    Ok(manifest)
}

/// Loads a dataset directory, verifying every checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|source| DataError::Json { path: path.clone(), source })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(super::format_err(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.samples.len() != manifest.n_samples {
        return Err(super::format_err(
            &path,
            format!("n_samples {} but {} entries", manifest.n_samples, manifest.samples.len()),
        ));
    }
    let grid = SimGrid::new(manifest.grid.clone())?;
    let geometry = make_subsampled_geometry(&grid, manifest.geometry.subsample_factor, manifest.geometry.scheme)?;
    if geometry.n_active() != manifest.geometry.n_active || geometry.plane_z() != manifest.geometry.plane_z {
        return Err(super::format_err(&path, "recorded geometry does not match the grid"));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let gp = dir.join(&e.ground_truth.file);
            let tp = dir.join(&e.traces.file);
            verify_checksum(&gp, &e.ground_truth.sha256)?;
            verify_checksum(&tp, &e.traces.sha256)?;
            let gt = read_volume(&gp)?;
            if gt.dims() != grid.dims() {
                return Err(DataError::Shape(format!("{} has dims {:?}, grid {:?}", gp.display(), gt.dims(), grid.dims())));
            }
            let tr = read_traces(&tp, &geometry)?;
            if tr.nt() != grid.nt() {
                return Err(DataError::Shape(format!("{} has {} samples, grid nt {}", tp.display(), tr.nt(), grid.nt())));
            }
            Ok((gt, tr))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, grid, geometry, samples })
}
