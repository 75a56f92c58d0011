//! Additive coupling layers and the invertible squeeze.

use super::conv::{conv_backward, conv_forward, leaky_relu, leaky_relu_backward, ConvKernel};
use super::tensor::{Real, TensorField};
use super::{InnError, Result};

/// Which channel half a coupling layer rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// Keep the first half, update the second.
    UpdateSecond,
    /// Keep the second half, update the first.
    UpdateFirst,
}

impl Parity {
    pub fn for_layer(index: usize) -> Self {
        if index.is_multiple_of(2) {
            Parity::UpdateSecond
        } else {
            Parity::UpdateFirst
        }
    }

    /// (kept, updated) channel offsets for a state of `half * 2` channels.
    pub fn offsets(self, half: usize) -> (usize, usize) {
        match self {
            Parity::UpdateSecond => (0, half),
            Parity::UpdateFirst => (half, 0),
        }
    }
}

/// `(a, b) -> (a, b + f([a, cond]))` with `f = conv2 . lrelu . conv1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayerParams<T> {
    pub parity: Parity,
    pub conv1: ConvKernel<T>,
    pub conv2: ConvKernel<T>,
}

/// Intermediates of one evaluation of `f`, kept only while a layer is
/// being differentiated.
pub struct ResidualCache<T> {
    pub input: TensorField<T>,
    pub pre_activation: TensorField<T>,
    pub activation: TensorField<T>,
}

impl<T: Real> ResidualCache<T> {
    pub fn tensors(&self) -> [&TensorField<T>; 3] {
        [&self.input, &self.pre_activation, &self.activation]
    }
}

impl<T: Real> CouplingLayerParams<T> {
    pub fn half(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn conditioning_channels(&self) -> usize {
        self.conv1.in_channels - self.half()
    }

    pub fn hidden(&self) -> usize {
        self.conv1.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.conv1.validate()?;
        self.conv2.validate()?;
        if self.conv1.in_channels < self.half() || self.conv2.in_channels != self.conv1.out_channels {
            return Err(InnError::Shape("coupling convs do not chain".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.conv1.n_params() + self.conv2.n_params()
    }

    fn check(&self, state: &TensorField<T>, cond: &TensorField<T>) -> Result<()> {
        if !state.channels().is_multiple_of(2) {
            return Err(InnError::OddChannels(state.channels()));
        }
        if state.channels() != 2 * self.half() {
            return Err(InnError::Shape(format!(
                "layer expects {} state channels, got {}",
                2 * self.half(),
                state.channels()
            )));
        }
        if cond.dims() != state.dims() || cond.channels() != self.conditioning_channels() {
            return Err(InnError::Shape(format!(
                "conditioning must be {} channels over {:?}, got {} over {:?}",
                self.conditioning_channels(),
                state.dims(),
                cond.channels(),
                cond.dims()
            )));
        }
        Ok(())
    }

    /// `f([a, cond])` together with its intermediates.
    pub fn residual_with_cache(&self, kept: &TensorField<T>, cond: &TensorField<T>) -> Result<(TensorField<T>, ResidualCache<T>)> {
        let input = TensorField::concat(&[kept, cond])?;
        let pre_activation = conv_forward(&input, &self.conv1)?;
        let activation = leaky_relu(&pre_activation);
        let out = conv_forward(&activation, &self.conv2)?;
        Ok((out, ResidualCache { input, pre_activation, activation }))
    }

    pub fn residual(&self, kept: &TensorField<T>, cond: &TensorField<T>) -> Result<TensorField<T>> {
        self.residual_with_cache(kept, cond).map(|(out, _)| out)
    }

    /// Backpropagate `grad_out` of `f` through a cached evaluation. Returns
    /// the gradient w.r.t. the kept half and accumulates parameter gradients
    /// into `grads`.
    pub fn residual_backward(
        &self,
        cache: &ResidualCache<T>,
        grad_out: &TensorField<T>,
        grads: &mut CouplingLayerParams<T>,
    ) -> Result<TensorField<T>> {
        let (grad_act, g2) = conv_backward(&cache.activation, &self.conv2, grad_out)?;
        let grad_pre = leaky_relu_backward(&cache.pre_activation, &grad_act);
        let (grad_in, g1) = conv_backward(&cache.input, &self.conv1, &grad_pre)?;
        accumulate(&mut grads.conv1, &g1);
        accumulate(&mut grads.conv2, &g2);
        Ok(grad_in.channel_block(0, self.half()))
    }

    pub fn zeros_like(&self) -> Self {
        CouplingLayerParams {
            parity: self.parity,
            conv1: ConvKernel::zeros(self.conv1.out_channels, self.conv1.in_channels, self.conv1.extent),
            conv2: ConvKernel::zeros(self.conv2.out_channels, self.conv2.in_channels, self.conv2.extent),
        }
    }
}

fn accumulate<T: Real>(dst: &mut ConvKernel<T>, src: &ConvKernel<T>) {
    for (d, s) in dst.weights.iter_mut().zip(&src.weights) {
        *d += *s;
    }
    for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
        *d += *s;
    }
}

pub fn coupling_forward<T: Real>(
    state: &TensorField<T>,
    cond: &TensorField<T>,
    params: &CouplingLayerParams<T>,
) -> Result<TensorField<T>> {
    params.check(state, cond)?;
    let half = params.half();
    let (kept_at, upd_at) = params.parity.offsets(half);
    let f = params.residual(&state.channel_block(kept_at, half), cond)?;
    let mut out = state.clone();
    let s = state.spatial_len();
    for (o, v) in out.data_mut()[upd_at * s..(upd_at + half) * s].iter_mut().zip(f.data()) {
        *o += *v;
    }
    Ok(out)
}

pub fn coupling_inverse<T: Real>(
    state_out: &TensorField<T>,
    cond: &TensorField<T>,
    params: &CouplingLayerParams<T>,
) -> Result<TensorField<T>> {
    params.check(state_out, cond)?;
    let half = params.half();
    let (kept_at, upd_at) = params.parity.offsets(half);
    let f = params.residual(&state_out.channel_block(kept_at, half), cond)?;
    let mut out = state_out.clone();
    let s = state_out.spatial_len();
    for (o, v) in out.data_mut()[upd_at * s..(upd_at + half) * s].iter_mut().zip(f.data()) {
        *o -= *v;
    }
    Ok(out)
}

/// Axes of extent > 1 are folded by 2; `[2,1,2]` for a 2D field.
fn squeeze_factors(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| if d > 1 { 2 } else { 1 })
}

/// Space-to-channel rearrangement by 2 along each non-trivial axis. Output
/// channel `c * f + sub` holds the sub-lattice `sub` of input channel `c`.
pub fn squeeze<T: Real>(state: &TensorField<T>) -> Result<TensorField<T>> {
    let dims = state.dims();
    if dims.iter().any(|&d| d > 1 && d % 2 != 0) {
        return Err(InnError::OddSpatial(dims));
    }
    let fac = squeeze_factors(dims);
    let folds: usize = fac.iter().product();
    let small = [dims[0] / fac[0], dims[1] / fac[1], dims[2] / fac[2]];
    let mut out = TensorField::zeros(state.channels() * folds, small);
    let small_len = out.spatial_len();
    let data = out.data_mut();
    for c in 0..state.channels() {
        let src = state.channel(c);
        for a in 0..fac[0] {
            for b in 0..fac[1] {
                for d in 0..fac[2] {
                    let sub = (a * fac[1] + b) * fac[2] + d;
                    let dst = &mut data[(c * folds + sub) * small_len..(c * folds + sub + 1) * small_len];
                    for i in 0..small[0] {
                        for j in 0..small[1] {
                            for k in 0..small[2] {
                                let si = ((fac[0] * i + a) * dims[1] + fac[1] * j + b) * dims[2] + fac[2] * k + d;
                                dst[(i * small[1] + j) * small[2] + k] = src[si];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`squeeze`] for a field that was squeezed from a 2D (`two_d`)
/// or 3D layout.
pub fn unsqueeze<T: Real>(state: &TensorField<T>, two_d: bool) -> Result<TensorField<T>> {
    let small = state.dims();
    let fac = if two_d { [2, 1, 2] } else { [2, 2, 2] };
    let folds: usize = fac.iter().product();
    if !state.channels().is_multiple_of(folds) || (two_d && small[1] != 1) {
        return Err(InnError::Shape(format!(
            "cannot unsqueeze {} channels over {small:?}",
            state.channels()
        )));
    }
    let dims = [small[0] * fac[0], small[1] * fac[1], small[2] * fac[2]];
    let channels = state.channels() / folds;
    let mut out = TensorField::zeros(channels, dims);
    let len = out.spatial_len();
    let data = out.data_mut();
    for c in 0..channels {
        let dst = &mut data[c * len..(c + 1) * len];
        for a in 0..fac[0] {
            for b in 0..fac[1] {
                for d in 0..fac[2] {
                    let sub = (a * fac[1] + b) * fac[2] + d;
                    let src = state.channel(c * folds + sub);
                    for i in 0..small[0] {
                        for j in 0..small[1] {
                            for k in 0..small[2] {
                                let di = ((fac[0] * i + a) * dims[1] + fac[1] * j + b) * dims[2] + fac[2] * k + d;
                                dst[di] = src[(i * small[1] + j) * small[2] + k];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
