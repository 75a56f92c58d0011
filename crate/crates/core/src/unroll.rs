//! Loop-unrolled reconstruction `x_{i+1}, s_{i+1} = stage_i(x_i, s_i, grad_i)`
//! with greedy per-stage supervised training.
//!
//! Each step spends one forward and one adjoint solve on the misfit
//! gradient. Training runs on precomputed [`SampleRecord`]s, so the inner
//! optimization loop never touches the wave operator.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, derive_seed, sha256_hex, verify_checksum, ArrayKind, DataError};
use crate::inn::{init_params, stage_backward, stage_forward, ArchSpec, InnError, InnState, Real, StageParams, TensorField};
use crate::wave::{SolveTally, Traces, Volume, WaveError, WaveOperator};

#[derive(Debug, Error)]
pub enum UnrollError {
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Inn(#[from] InnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch} (sample {sample}, loss {loss})")]
    NonFinite { stage: usize, epoch: usize, batch: usize, sample: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, UnrollError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Zeros,
}

/// Trained stages in application order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionPlan<T> {
    pub stages: Vec<StageParams<T>>,
    pub x0_policy: InitPolicy,
    pub s0_policy: InitPolicy,
}

impl<T: Real> ReconstructionPlan<T> {
    pub fn new(stages: Vec<StageParams<T>>) -> Result<Self> {
        let plan = ReconstructionPlan { stages, x0_policy: InitPolicy::Zeros, s0_policy: InitPolicy::Zeros };
        plan.validate()?;
        Ok(plan)
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or_else(|| UnrollError::Plan("plan has no stages".into()))?;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if s.arch.channels != first.arch.channels || s.two_d != first.two_d {
                return Err(UnrollError::Plan(format!("stage {i} does not share the state layout of stage 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Set each stage's conditioning scale to 1 / rms of its input gradients
    /// before training.
    pub calibrate_conditioning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs_per_stage: 50,
            batch_size: 5,
            seed: 0,
            loss: LossKind::Mse,
            calibrate_conditioning: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UnrollError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: usize,
    pub stage: usize,
    /// PDE solves spent producing this record.
    pub solves: u64,
}

/// Training input for one stage: the state entering it, the misfit gradient
/// at that state, and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub ground_truth: Volume,
    pub x: Volume,
    pub s: TensorField<f64>,
    pub g: Volume,
    pub provenance: Provenance,
}

/// Adam moments, one entry per flattened parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }
}

/// One bias-corrected Adam step in place.
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], opt: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(UnrollError::Inn(InnError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            opt.m.len()
        ))));
    }
    opt.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
        let step = cfg.learning_rate * (opt.m[i] / c1) / ((opt.v[i] / c2).sqrt() + cfg.adam_eps);
        params[i] = T::of(params[i].as_f64() - step);
    }
    Ok(())
}

fn field_of<T: Real>(v: &Volume) -> Result<TensorField<T>> {
    Ok(TensorField::from_f64(1, v.dims(), v.values())?)
}

fn volume_of<T: Real>(f: &TensorField<T>) -> Result<Volume> {
    Ok(Volume::from_vec(f.dims(), f.to_f64_vec())?)
}

/// Zero memory field for a state with `channels` channels.
pub fn zero_memory<T: Real>(channels: usize, dims: [usize; 3]) -> Result<TensorField<T>> {
    if channels < 2 {
        return Err(UnrollError::Plan(format!("state needs at least 2 channels, got {channels}")));
    }
    Ok(TensorField::zeros(channels - 1, dims))
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub x: Volume,
    pub s: TensorField<T>,
    /// `0.5 ||A x_i - y||^2` at the input estimate.
    pub misfit: f64,
}

/// One unrolled iteration: two PDE solves for the gradient, then the stage.
pub fn unrolled_step<T: Real>(
    op: &WaveOperator,
    x: &Volume,
    s: &TensorField<T>,
    y_obs: &Traces,
    stage: &StageParams<T>,
) -> Result<StepOutput<T>> {
    let (misfit, g) = op.misfit_and_gradient(x, y_obs)?;
    let state = InnState::from_parts(&field_of::<T>(x)?, s)?;
    let out = stage_forward(&state, &field_of::<T>(&g)?, stage, None)?;
    Ok(StepOutput { x: volume_of(&out.x_part())?, s: out.s_part(), misfit })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub x: Volume,
    /// Data misfit at the estimate entering each stage.
    pub misfits: Vec<f64>,
    pub solves: SolveTally,
}

/// `x_0 = 0`, `s_0 = 0`, then every stage of the plan in order.
pub fn reconstruct<T: Real>(op: &WaveOperator, y_obs: &Traces, plan: &ReconstructionPlan<T>) -> Result<Reconstruction> {
    plan.validate()?;
    let before = op.counter().snapshot();
    let dims = op.grid().dims();
    let mut x = Volume::zeros(op.grid());
    let mut s = zero_memory::<T>(plan.stages[0].arch.channels, dims)?;
    let mut misfits = Vec::with_capacity(plan.n_stages());
    for stage in &plan.stages {
        let out = unrolled_step(op, &x, &s, y_obs, stage)?;
        misfits.push(out.misfit);
        x = out.x;
        s = out.s;
    }
    Ok(Reconstruction { x, misfits, solves: op.counter().snapshot().since(before) })
}

/// Rolls every `(ground_truth, y_obs)` sample through the frozen stages and
/// records the state and gradient entering stage `frozen.len()`. Costs
/// `2 (frozen.len() + 1)` solves per sample.
pub fn make_stage_dataset<T: Real>(
    op: &WaveOperator,
    samples: &[(Volume, Traces)],
    frozen: &[StageParams<T>],
    arch: &ArchSpec,
) -> Result<Vec<SampleRecord>> {
    let stage = frozen.len();
    samples
        .par_iter()
        .enumerate()
        .map(|(id, (gt, y))| {
            let mut x = Volume::zeros(op.grid());
            let mut s = zero_memory::<T>(arch.channels, op.grid().dims())?;
            for st in frozen {
                let out = unrolled_step(op, &x, &s, y, st)?;
                x = out.x;
                s = out.s;
            }
            let g = op.misfit_gradient(&x, y)?;
            Ok(SampleRecord {
                ground_truth: gt.clone(),
                x,
                s: s.cast(),
                g,
                provenance: Provenance { sample_id: id, stage, solves: 2 * (stage as u64 + 1) },
            })
        })
        .collect()
}

/// `1 / rms(g)` over all records; 1 when every gradient vanishes.
pub fn conditioning_scale(records: &[SampleRecord]) -> f64 {
    let (sum, n) = records
        .iter()
        .fold((0.0, 0usize), |(s, n), r| (s + r.g.values().iter().map(|v| v * v).sum::<f64>(), n + r.g.values().len()));
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        1.0 / rms
    } else {
        1.0
    }
}

/// Loss and parameter gradient for one record.
fn sample_gradient<T: Real>(rec: &SampleRecord, stage: &StageParams<T>) -> Result<(f64, Vec<T>)> {
    let g = field_of::<T>(&rec.g)?;
    let state = InnState::from_parts(&field_of::<T>(&rec.x)?, &rec.s.cast())?;
    let out = stage_forward(&state, &g, stage, None)?;
    let x_out = out.x_part();
    let n = x_out.len() as f64;
    let mut grad_out = TensorField::<T>::zeros(out.field().channels(), out.field().dims());
    let mut loss = 0.0;
    for (i, (&xo, &gt)) in x_out.data().iter().zip(rec.ground_truth.values()).enumerate() {
        let d = xo.as_f64() - gt;
        loss += d * d;
        grad_out.data_mut()[i] = T::of(2.0 * d / n);
    }
    let back = stage_backward(&out, &grad_out, &g, stage)?;
    Ok((loss / n, back.grad_params.flatten()))
}

/// Mean over records of `||x_out - ground_truth||^2 / n_voxels`.
pub fn stage_loss<T: Real>(records: &[SampleRecord], stage: &StageParams<T>) -> Result<f64> {
    let losses = records
        .par_iter()
        .map(|rec| {
            let state = InnState::from_parts(&field_of::<T>(&rec.x)?, &rec.s.cast())?;
            let out = stage_forward(&state, &field_of::<T>(&rec.g)?, stage, None)?;
            let x = out.x_part();
            let d: f64 = x.data().iter().zip(rec.ground_truth.values()).map(|(a, b)| (a.as_f64() - b).powi(2)).sum();
            Ok(d / x.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / records.len().max(1) as f64)
}

/// Gradient of [`stage_loss`] w.r.t. the flattened parameters.
pub fn stage_loss_gradient<T: Real>(records: &[SampleRecord], stage: &StageParams<T>) -> Result<(f64, Vec<f64>)> {
    let parts = records.par_iter().map(|r| sample_gradient(r, stage)).collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; stage.n_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b.as_f64());
    }
    let n = records.len().max(1) as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStage<T> {
    pub stage: StageParams<T>,
    pub history: Vec<EpochLoss>,
}

/// Adam on the per-stage MSE. Batches follow a seeded shuffle; per-sample
/// gradients may run concurrently but are reduced in batch order, so the
/// result does not depend on the thread count. The epoch loss is the mean of
/// the per-sample losses seen during that epoch.
pub fn train_stage<T: Real>(
    records: &[SampleRecord],
    stage: StageParams<T>,
    cfg: &TrainConfig,
    stage_index: usize,
) -> Result<TrainedStage<T>> {
    train_stage_with(records, stage, cfg, stage_index, |_, _| {})
}

/// [`train_stage`] with a hook called after every epoch.
pub fn train_stage_with<T: Real>(
    records: &[SampleRecord],
    mut stage: StageParams<T>,
    cfg: &TrainConfig,
    stage_index: usize,
    mut on_epoch: impl FnMut(&EpochLoss, &StageParams<T>),
) -> Result<TrainedStage<T>> {
    cfg.validate()?;
    stage.validate()?;
    if cfg.calibrate_conditioning {
        stage.cond_scale = conditioning_scale(records);
    }
    let mut history = Vec::with_capacity(cfg.epochs_per_stage);
    if cfg.epochs_per_stage == 0 || records.is_empty() {
        return Ok(TrainedStage { stage, history });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage_index as u64));
    let mut opt = OptimizerState::new(stage.n_params());
    let mut flat = stage.flatten();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let start = Instant::now();
    for epoch in 0..cfg.epochs_per_stage {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let parts = idx.par_iter().map(|&i| sample_gradient(&records[i], &stage)).collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0f64; flat.len()];
            for (&i, (loss, g)) in idx.iter().zip(&parts) {
                if !loss.is_finite() || g.iter().any(|v| !v.as_f64().is_finite()) {
                    return Err(UnrollError::NonFinite { stage: stage_index, epoch, batch, sample: i, loss: *loss });
                }
                epoch_loss += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b.as_f64());
            }
            let inv = 1.0 / idx.len() as f64;
            let grad: Vec<T> = grad.iter().map(|v| T::of(v * inv)).collect();
            adam_update(&mut flat, &grad, &mut opt, cfg)?;
            stage.load_flat(&flat)?;
        }
        let entry = EpochLoss { epoch, mean_loss: epoch_loss / records.len() as f64, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&entry, &stage);
        history.push(entry);
    }
    Ok(TrainedStage { stage, history })
}

/// Greedy stagewise training: stage `i` is fit on records produced by the
/// frozen stages `0..i`. Stages already present in `done` are kept as they
/// are. `on_stage` runs after each newly trained stage (checkpointing).
#[allow(clippy::too_many_arguments)]
pub fn train_greedy<T: Real>(
    op: &WaveOperator,
    samples: &[(Volume, Traces)],
    arch: &ArchSpec,
    two_d: bool,
    n_stages: usize,
    cfg: &TrainConfig,
    mut done: Vec<StageParams<T>>,
    mut on_stage: impl FnMut(usize, &[StageParams<T>], &[EpochLoss]) -> Result<()>,
) -> Result<ReconstructionPlan<T>> {
    if n_stages == 0 {
        return Err(UnrollError::Plan("at least one stage is required".into()));
    }
    if done.len() > n_stages {
        return Err(UnrollError::Plan(format!("{} stages already trained, plan has {n_stages}", done.len())));
    }
    for i in done.len()..n_stages {
        let records = make_stage_dataset(op, samples, &done, arch)?;
        let init = init_params::<T>(arch, two_d, derive_seed(cfg.seed ^ 0x1417, i as u64))?;
        let trained = train_stage(&records, init, cfg, i)?;
        done.push(trained.stage);
        on_stage(i, &done, &trained.history)?;
    }
    ReconstructionPlan::new(done)
}

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub file: String,
    pub sha256: String,
    pub cond_scale: f64,
}

/// `plan.json`: architecture shared by all stages plus one parameter file
/// per stage (`stage_<i>.f64`, flattened in `StageParams::arrays` order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanManifest {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub two_d: bool,
    pub stages: Vec<StageEntry>,
}

/// Writes every stage file, then `plan.json` atomically.
pub fn save_plan<T: Real>(dir: &Path, stages: &[StageParams<T>]) -> Result<PlanManifest> {
    let first = stages.first().ok_or_else(|| UnrollError::Plan("nothing to save".into()))?;
    let mut entries = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        let file = format!("stage_{i}.f64");
        let flat: Vec<f64> = st.flatten().iter().map(|v| v.as_f64()).collect();
        let sha256 = data::write_array(&dir.join(&file), &[flat.len()], ArrayKind::Parameters, &flat)?;
        entries.push(StageEntry { file, sha256, cond_scale: st.cond_scale });
    }
    let manifest = PlanManifest { format_version: PLAN_FORMAT_VERSION, arch: first.arch.clone(), two_d: first.two_d, stages: entries };
    let path = dir.join("plan.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| DataError::Json { path: path.clone(), source })?;
    data::write_atomic(&path, &json)?;
    Ok(manifest)
}

/// Reads `plan.json` and every stage it lists, verifying checksums. An
/// absent `plan.json` yields no stages.
pub fn load_stages<T: Real>(dir: &Path) -> Result<(Option<PlanManifest>, Vec<StageParams<T>>)> {
    let path = dir.join("plan.json");
    if !path.exists() {
        return Ok((None, Vec::new()));
    }
    let text = std::fs::read(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
    let manifest: PlanManifest =
        serde_json::from_slice(&text).map_err(|source| DataError::Json { path: path.clone(), source })?;
    if manifest.format_version != PLAN_FORMAT_VERSION {
        return Err(UnrollError::Plan(format!("unsupported plan format version {}", manifest.format_version)));
    }
    let mut stages = Vec::with_capacity(manifest.stages.len());
    for e in &manifest.stages {
        let p = dir.join(&e.file);
        verify_checksum(&p, &e.sha256)?;
        let (meta, flat) = data::read_array(&p)?;
        if meta.kind != ArrayKind::Parameters {
            return Err(UnrollError::Plan(format!("{} is not a parameter file", p.display())));
        }
        let mut st = init_params::<T>(&manifest.arch, manifest.two_d, 0)?;
        let cast: Vec<T> = flat.iter().map(|&v| T::of(v)).collect();
        st.load_flat(&cast)?;
        st.cond_scale = e.cond_scale;
        stages.push(st);
    }
    Ok((Some(manifest), stages))
}

pub fn load_plan<T: Real>(dir: &Path) -> Result<ReconstructionPlan<T>> {
    let (manifest, stages) = load_stages(dir)?;
    if manifest.is_none() {
        return Err(UnrollError::Plan(format!("no plan.json in {}", dir.display())));
    }
    ReconstructionPlan::new(stages)
}

/// Digest of a plan's parameter bytes, for determinism audits.
pub fn plan_digest<T: Real>(stages: &[StageParams<T>]) -> String {
    let mut bytes = Vec::new();
    for st in stages {
        bytes.extend_from_slice(&st.cond_scale.to_le_bytes());
        for v in st.flatten() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_minus_lr() {
        let cfg = TrainConfig::default();
        let mut p = [0.5f64];
        let mut opt = OptimizerState::new(1);
        adam_update(&mut p, &[1.0], &mut opt, &cfg).unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10, "{}", p[0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let cfg = TrainConfig::default();
        let mut p = [0.5f32, -1.0];
        let mut opt = OptimizerState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut opt, &cfg).unwrap();
        assert_eq!(p, [0.5, -1.0]);
        opt.m = vec![1.0, 1.0];
        let mut q = [0.0f64, 0.0];
        adam_update(&mut q, &[0.0, 0.0], &mut opt, &cfg).unwrap();
        assert_eq!(opt.m, vec![0.9, 0.9]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut opt = OptimizerState::new(2);
        assert!(adam_update(&mut [0.0f64; 2], &[0.0; 3], &mut opt, &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { adam_beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_plan_rejected() {
        assert!(ReconstructionPlan::<f64>::new(Vec::new()).is_err());
    }
}
