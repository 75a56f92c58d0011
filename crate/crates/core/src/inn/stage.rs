use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, leaky_relu_backward, ConvKernel};
use super::coupling::{coupling_forward, coupling_inverse, squeeze, unsqueeze, CouplingLayerParams, Parity};
use super::tensor::{Real, TensorField};
use super::{InnError, Result};

/// Architecture of one unrolled stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    /// State channels: one for the estimate plus the memory channels.
    pub channels: usize,
    pub depth: usize,
    /// Hidden width of each coupling residual.
    pub hidden: usize,
    /// Squeeze before this layer index and unsqueeze before the last layer.
    pub squeeze_after: Option<usize>,
    pub kernel: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec { channels: 8, depth: 12, hidden: 16, squeeze_after: Some(4), kernel: 3 }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(InnError::Arch(format!("channels must be even and at least 2, got {}", self.channels)));
        }
        if self.depth == 0 || self.hidden == 0 {
            return Err(InnError::Arch("depth and hidden must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(InnError::Arch(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if let Some(p) = self.squeeze_after {
            if p + 1 >= self.depth {
                return Err(InnError::Arch(format!(
                    "squeeze_after = {p} leaves no layer between squeeze and the final unsqueeze (depth {})",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn memory_channels(&self) -> usize {
        self.channels - 1
    }

    pub fn squeeze_plan(&self) -> Vec<Resample> {
        match self.squeeze_after {
            Some(p) => vec![
                Resample { before_layer: p, squeeze: true },
                Resample { before_layer: self.depth - 1, squeeze: false },
            ],
            None => Vec::new(),
        }
    }
}

/// Squeeze (`squeeze == true`) or unsqueeze applied just before a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resample {
    pub before_layer: usize,
    pub squeeze: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOp {
    Squeeze,
    Unsqueeze,
    Layer(usize),
}

/// All learnable parameters of one stage, plus the fixed scale applied to
/// the conditioning gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub arch: ArchSpec,
    pub two_d: bool,
    pub cond_scale: f64,
    pub layers: Vec<CouplingLayerParams<T>>,
    pub squeeze_plan: Vec<Resample>,
}

impl<T: Real> StageParams<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn folds(&self) -> usize {
        if self.two_d {
            4
        } else {
            8
        }
    }

    /// Layer and resampling sequence in forward order.
    pub fn ops(&self) -> Vec<StageOp> {
        let mut ops = Vec::with_capacity(self.layers.len() + self.squeeze_plan.len());
        for l in 0..self.layers.len() {
            for r in self.squeeze_plan.iter().filter(|r| r.before_layer == l) {
                ops.push(if r.squeeze { StageOp::Squeeze } else { StageOp::Unsqueeze });
            }
            ops.push(StageOp::Layer(l));
        }
        ops
    }

    /// Squeeze level (0 = full resolution) at which each layer runs.
    pub fn layer_levels(&self) -> Result<Vec<usize>> {
        plan_levels(self.layers.len(), &self.squeeze_plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.depth {
            return Err(InnError::Arch(format!("{} layers for depth {}", self.layers.len(), self.arch.depth)));
        }
        let levels = self.layer_levels()?;
        for (l, (layer, &level)) in self.layers.iter().zip(&levels).enumerate() {
            layer.validate()?;
            let scale = self.folds().pow(level as u32);
            if 2 * layer.half() != self.arch.channels * scale || layer.conditioning_channels() != scale {
                return Err(InnError::Arch(format!(
                    "layer {l} has {} state / {} conditioning channels, expected {} / {scale}",
                    2 * layer.half(),
                    layer.conditioning_channels(),
                    self.arch.channels * scale
                )));
            }
        }
        Ok(())
    }

    /// Same structure, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        StageParams { layers: self.layers.iter().map(|l| l.zeros_like()).collect(), ..self.clone() }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }

    /// Parameter buffers in a fixed order: per layer conv1 weight, conv1
    /// bias, conv2 weight, conv2 bias.
    pub fn arrays(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.conv1.weights[..], &l.conv1.bias[..], &l.conv2.weights[..], &l.conv2.bias[..]])
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [&mut l.conv1.weights[..], &mut l.conv1.bias[..], &mut l.conv2.weights[..], &mut l.conv2.bias[..]]
            })
            .collect()
    }

    /// `(name, shape)` of each buffer, matching [`Self::arrays`].
    pub fn array_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, k) in [("conv1", &l.conv1), ("conv2", &l.conv2)] {
                let mut shape = vec![k.out_channels, k.in_channels];
                shape.extend(k.extent);
                out.push((format!("layer{i}.{name}.weight"), shape));
                out.push((format!("layer{i}.{name}.bias"), vec![k.out_channels]));
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        self.arrays().concat()
    }

    /// Overwrite every parameter from a flat buffer in [`Self::arrays`] order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(InnError::Shape(format!("{} values for {} parameters", flat.len(), self.n_params())));
        }
        let mut at = 0;
        for buf in self.arrays_mut() {
            buf.copy_from_slice(&flat[at..at + buf.len()]);
            at += buf.len();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> StageParams<U> {
        let cast_kernel = |k: &ConvKernel<T>| ConvKernel {
            out_channels: k.out_channels,
            in_channels: k.in_channels,
            extent: k.extent,
            weights: k.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: k.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        };
        StageParams {
            arch: self.arch.clone(),
            two_d: self.two_d,
            cond_scale: self.cond_scale,
            layers: self
                .layers
                .iter()
                .map(|l| CouplingLayerParams { parity: l.parity, conv1: cast_kernel(&l.conv1), conv2: cast_kernel(&l.conv2) })
                .collect(),
            squeeze_plan: self.squeeze_plan.clone(),
        }
    }
}

/// Seeded initialization. First convs are He-uniform with bound
/// `sqrt(6 / fan_in)`; second convs are zero, so the stage starts as the
/// identity map.
pub fn init_params<T: Real>(arch: &ArchSpec, two_d: bool, seed: u64) -> Result<StageParams<T>> {
    arch.validate()?;
    let folds = if two_d { 4 } else { 8 };
    let extent = if two_d { [arch.kernel, 1, arch.kernel] } else { [arch.kernel; 3] };
    let taps: usize = extent.iter().product();
    let mut params = StageParams {
        arch: arch.clone(),
        two_d,
        cond_scale: 1.0,
        layers: Vec::with_capacity(arch.depth),
        squeeze_plan: arch.squeeze_plan(),
    };
    let levels = plan_levels(arch.depth, &params.squeeze_plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, &level) in levels.iter().enumerate() {
        let scale = folds_pow(folds, level);
        let half = arch.channels * scale / 2;
        let in_ch = half + scale;
        let mut conv1 = ConvKernel::zeros(arch.hidden, in_ch, extent);
        let bound = (6.0 / (in_ch * taps) as f64).sqrt();
        for w in conv1.weights.iter_mut() {
            *w = T::of(rng.gen_range(-bound..bound));
        }
        let conv2 = ConvKernel::zeros(half, arch.hidden, extent);
        params.layers.push(CouplingLayerParams { parity: Parity::for_layer(l), conv1, conv2 });
    }
    params.validate()?;
    Ok(params)
}

fn plan_levels(depth: usize, plan: &[Resample]) -> Result<Vec<usize>> {
    let mut level = 0usize;
    let mut levels = Vec::with_capacity(depth);
    for l in 0..depth {
        for r in plan.iter().filter(|r| r.before_layer == l) {
            if r.squeeze {
                level += 1;
            } else {
                level = level
                    .checked_sub(1)
                    .ok_or_else(|| InnError::Arch("unsqueeze without matching squeeze".into()))?;
            }
        }
        levels.push(level);
    }
    if level != 0 {
        return Err(InnError::Arch("stage must end at full resolution".into()));
    }
    Ok(levels)
}

fn folds_pow(folds: usize, level: usize) -> usize {
    folds.pow(level as u32)
}

/// The invertible state: channel 0 holds the estimate `x`, channels
/// `1..channels` the memory `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnState<T> {
    field: TensorField<T>,
}

impl<T: Real> InnState<T> {
    pub fn from_parts(x: &TensorField<T>, s: &TensorField<T>) -> Result<Self> {
        if x.channels() != 1 {
            return Err(InnError::Shape(format!("estimate must be one channel, got {}", x.channels())));
        }
        Ok(InnState { field: TensorField::concat(&[x, s])? })
    }

    pub fn from_field(field: TensorField<T>) -> Result<Self> {
        if field.channels() < 2 {
            return Err(InnError::Shape("state needs the estimate plus memory channels".into()));
        }
        Ok(InnState { field })
    }

    pub fn field(&self) -> &TensorField<T> {
        &self.field
    }

    pub fn into_field(self) -> TensorField<T> {
        self.field
    }

    pub fn x_part(&self) -> TensorField<T> {
        self.field.channel_block(0, 1)
    }

    pub fn s_part(&self) -> TensorField<T> {
        self.field.channel_block(1, self.field.channels() - 1)
    }
}

/// Live/peak accounting of intermediate tensors held during a pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationCacheStats {
    pub peak_cached_tensors: usize,
    pub peak_cached_scalars: usize,
    live_tensors: usize,
    live_scalars: usize,
}

impl ActivationCacheStats {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn hold<T: Real>(&mut self, t: &TensorField<T>) {
        self.live_tensors += 1;
        self.live_scalars += t.len();
        self.peak_cached_tensors = self.peak_cached_tensors.max(self.live_tensors);
        self.peak_cached_scalars = self.peak_cached_scalars.max(self.live_scalars);
    }

    fn release<T: Real>(&mut self, t: &TensorField<T>) {
        self.live_tensors -= 1;
        self.live_scalars -= t.len();
    }
}

/// Conditioning fields at each resolution the stage visits.
struct Conditioning<T> {
    levels: Vec<TensorField<T>>,
}

impl<T: Real> Conditioning<T> {
    fn new(grad_field: &TensorField<T>, params: &StageParams<T>, state_dims: [usize; 3]) -> Result<Self> {
        if grad_field.channels() != 1 || grad_field.dims() != state_dims {
            return Err(InnError::Shape(format!(
                "conditioning gradient must be one channel over {state_dims:?}, got {} over {:?}",
                grad_field.channels(),
                grad_field.dims()
            )));
        }
        let depth = params.layer_levels()?.into_iter().max().unwrap_or(0);
        let mut levels = vec![grad_field.scaled(T::of(params.cond_scale))];
        for _ in 0..depth {
            let next = squeeze(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        Ok(Conditioning { levels })
    }
}

fn check_state<T: Real>(state: &TensorField<T>, params: &StageParams<T>) -> Result<()> {
    if state.channels() != params.arch.channels {
        return Err(InnError::Shape(format!(
            "stage expects {} state channels, got {}",
            params.arch.channels,
            state.channels()
        )));
    }
    if params.two_d != (state.dims()[1] == 1) {
        return Err(InnError::Shape("stage dimensionality does not match the state".into()));
    }
    Ok(())
}

/// Apply the stage. The map is a bijection of the state for fixed
/// `grad_field` and parameters; nothing is retained after returning.
pub fn stage_forward<T: Real>(
    state: &InnState<T>,
    grad_field: &TensorField<T>,
    params: &StageParams<T>,
    mut record: Option<&mut ActivationCacheStats>,
) -> Result<InnState<T>> {
    check_state(&state.field, params)?;
    let cond = Conditioning::new(grad_field, params, state.field.dims())?;
    if let Some(r) = record.as_deref_mut() {
        r.reset();
        cond.levels.iter().for_each(|c| r.hold(c));
    }
    let mut level = 0usize;
    let mut cur = state.field.clone();
    if let Some(r) = record.as_deref_mut() {
        r.hold(&cur);
    }
    for op in params.ops() {
        let next = match op {
            StageOp::Squeeze => {
                level += 1;
                squeeze(&cur)?
            }
            StageOp::Unsqueeze => {
                level -= 1;
                unsqueeze(&cur, params.two_d)?
            }
            StageOp::Layer(l) => coupling_forward(&cur, &cond.levels[level], &params.layers[l])?,
        };
        if let Some(r) = record.as_deref_mut() {
            r.hold(&next);
            r.release(&cur);
        }
        cur = next;
    }
    InnState::from_field(cur)
}

/// Exact inverse of [`stage_forward`].
pub fn stage_inverse<T: Real>(output: &InnState<T>, grad_field: &TensorField<T>, params: &StageParams<T>) -> Result<InnState<T>> {
    check_state(&output.field, params)?;
    let cond = Conditioning::new(grad_field, params, output.field.dims())?;
    let mut level = 0usize;
    let mut cur = output.field.clone();
    for op in params.ops().into_iter().rev() {
        cur = match op {
            StageOp::Squeeze => {
                level -= 1;
                unsqueeze(&cur, params.two_d)?
            }
            StageOp::Unsqueeze => {
                level += 1;
                squeeze(&cur)?
            }
            StageOp::Layer(l) => coupling_inverse(&cur, &cond.levels[level], &params.layers[l])?,
        };
    }
    InnState::from_field(cur)
}

/// Result of [`stage_backward`].
#[derive(Debug, Clone)]
pub struct StageBackward<T> {
    pub input: InnState<T>,
    pub grad_input: TensorField<T>,
    pub grad_params: StageParams<T>,
    pub stats: ActivationCacheStats,
}

/// Gradients of a scalar loss through the stage, given the stage output and
/// the loss gradient w.r.t. that output.
///
/// Layers are visited in reverse; each layer's input is rebuilt from its
/// output by `coupling_inverse`, its residual is re-evaluated with a local
/// cache, differentiated, and the cache dropped before the next layer. The
/// peak number of live intermediates is therefore independent of depth.
///
/// `output` must come from [`stage_forward`] with the same `grad_field` and
/// `params`; otherwise the rebuilt inputs (and gradients) are meaningless
/// and nothing here can detect it.
pub fn stage_backward<T: Real>(
    output: &InnState<T>,
    grad_wrt_output: &TensorField<T>,
    grad_field: &TensorField<T>,
    params: &StageParams<T>,
) -> Result<StageBackward<T>> {
    check_state(&output.field, params)?;
    if !grad_wrt_output.same_shape(&output.field) {
        return Err(InnError::Shape("output gradient must match the stage output".into()));
    }
    let mut stats = ActivationCacheStats::default();
    let cond = Conditioning::new(grad_field, params, output.field.dims())?;
    cond.levels.iter().for_each(|c| stats.hold(c));
    let mut level = 0usize;

    let mut grads = params.zeros_like();
    let mut y = output.field.clone();
    let mut gy = grad_wrt_output.clone();
    stats.hold(&y);
    stats.hold(&gy);

    for op in params.ops().into_iter().rev() {
        match op {
            StageOp::Squeeze | StageOp::Unsqueeze => {
                let undo = |t: &TensorField<T>| -> Result<TensorField<T>> {
                    if op == StageOp::Squeeze {
                        unsqueeze(t, params.two_d)
                    } else {
                        squeeze(t)
                    }
                };
                let y_prev = undo(&y)?;
                stats.hold(&y_prev);
                stats.release(&y);
                let gy_prev = undo(&gy)?;
                stats.hold(&gy_prev);
                stats.release(&gy);
                y = y_prev;
                gy = gy_prev;
                if op == StageOp::Squeeze {
                    level -= 1;
                } else {
                    level += 1;
                }
            }
            StageOp::Layer(l) => {
                let layer = &params.layers[l];
                let c = &cond.levels[level];
                let half = layer.half();
                let (kept_at, upd_at) = layer.parity.offsets(half);

                let kept = y.channel_block(kept_at, half);
                stats.hold(&kept);
                let (f, cache) = layer.residual_with_cache(&kept, c)?;
                cache.tensors().iter().for_each(|t| stats.hold(*t));
                stats.hold(&f);

                // rebuild the layer input: b = b' - f(a)
                let mut x = y.clone();
                stats.hold(&x);
                let s = x.spatial_len();
                for (v, fv) in x.data_mut()[upd_at * s..(upd_at + half) * s].iter_mut().zip(f.data()) {
                    *v -= *fv;
                }
                stats.release(&f);
                drop(f);

                // local backprop through f
                let g_upd = gy.channel_block(upd_at, half);
                stats.hold(&g_upd);
                let (grad_act, g2) = conv_backward(&cache.activation, &layer.conv2, &g_upd)?;
                stats.hold(&grad_act);
                let grad_pre = leaky_relu_backward(&cache.pre_activation, &grad_act);
                stats.hold(&grad_pre);
                stats.release(&grad_act);
                drop(grad_act);
                let (grad_in, g1) = conv_backward(&cache.input, &layer.conv1, &grad_pre)?;
                stats.hold(&grad_in);
                stats.release(&grad_pre);
                drop(grad_pre);

                let gl = &mut grads.layers[l];
                for (d, v) in gl.conv1.weights.iter_mut().zip(&g1.weights) {
                    *d += *v;
                }
                for (d, v) in gl.conv1.bias.iter_mut().zip(&g1.bias) {
                    *d += *v;
                }
                for (d, v) in gl.conv2.weights.iter_mut().zip(&g2.weights) {
                    *d += *v;
                }
                for (d, v) in gl.conv2.bias.iter_mut().zip(&g2.bias) {
                    *d += *v;
                }

                // the kept half also feeds f: dL/da = dL/da' + J_f^T dL/db'
                for (g, v) in gy.data_mut()[kept_at * s..(kept_at + half) * s].iter_mut().zip(grad_in.data()) {
                    *g += *v;
                }

                stats.release(&grad_in);
                stats.release(&g_upd);
                cache.tensors().iter().for_each(|t| stats.release(*t));
                stats.release(&kept);
                stats.release(&y);
                y = x;
            }
        }
    }
    Ok(StageBackward { input: InnState::from_field(y)?, grad_input: gy, grad_params: grads, stats })
}
