//! Same-size cross-correlation with zero padding, and its exact gradients.

use super::tensor::{Real, TensorField};
use super::{InnError, Result};

/// Weights laid out as (out, in, kx, ky, kz); 2D kernels have `ky == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub extent: [usize; 3],
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, extent: [usize; 3]) -> Self {
        let taps: usize = extent.iter().product();
        ConvKernel {
            out_channels,
            in_channels,
            extent,
            weights: vec![T::zero(); out_channels * in_channels * taps],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// The kernel whose correlation is the identity map (`in == out`).
    pub fn identity(channels: usize, extent: [usize; 3]) -> Self {
        let mut k = Self::zeros(channels, channels, extent);
        let centre = ((extent[0] / 2) * extent[1] + extent[1] / 2) * extent[2] + extent[2] / 2;
        let taps = k.taps();
        for c in 0..channels {
            k.weights[(c * channels + c) * taps + centre] = T::one();
        }
        k
    }

    pub fn taps(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn weight(&self, o: usize, c: usize, a: usize, b: usize, d: usize) -> T {
        self.weights[(((o * self.in_channels + c) * self.extent[0] + a) * self.extent[1] + b) * self.extent[2] + d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|e| e % 2 == 0) {
            return Err(InnError::Shape(format!("kernel extent {:?} must be odd", self.extent)));
        }
        if self.weights.len() != self.out_channels * self.in_channels * self.taps() || self.bias.len() != self.out_channels {
            return Err(InnError::Shape("kernel buffers do not match declared shape".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(InnError::NonFinite);
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn check(input: &TensorField<impl Real>, kernel: &ConvKernel<impl Real>) -> Result<()> {
    if input.channels() != kernel.in_channels {
        return Err(InnError::Shape(format!(
            "kernel expects {} input channels, field has {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    let dims = input.dims();
    if (0..3).any(|a| dims[a] < kernel.extent[a]) {
        return Err(InnError::Shape(format!(
            "spatial dims {dims:?} smaller than kernel extent {:?}",
            kernel.extent
        )));
    }
    Ok(())
}

/// For tap offset `off` on an axis of length `n`: output range `[lo, hi)`
/// such that `i + off` stays inside.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)) as usize;
    (lo, hi.max(lo))
}

/// Visits every tap and output row, calling `f(tap, out_start, in_start, len)`
/// with the matching flat offsets of the output and shifted input rows.
#[inline]
fn for_each_tap(
    dims: [usize; 3],
    kernel_extent: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let [nx, ny, nz] = dims;
    let r = [kernel_extent[0] / 2, kernel_extent[1] / 2, kernel_extent[2] / 2];
    let mut tap = 0;
    for a in 0..kernel_extent[0] {
        let oi = a as isize - r[0] as isize;
        let (i0, i1) = valid_range(nx, oi);
        for b in 0..kernel_extent[1] {
            let oj = b as isize - r[1] as isize;
            let (j0, j1) = valid_range(ny, oj);
            for d in 0..kernel_extent[2] {
                let ok = d as isize - r[2] as isize;
                let (k0, k1) = valid_range(nz, ok);
                for i in i0..i1 {
                    for j in j0..j1 {
                        let out_row = (i * ny + j) * nz;
                        let in_row = (((i as isize + oi) as usize) * ny + (j as isize + oj) as usize) * nz;
                        f(tap, out_row + k0, (in_row as isize + k0 as isize + ok) as usize, k1 - k0);
                    }
                }
                tap += 1;
            }
        }
    }
}

/// `out[o] = bias[o] + sum_c corr(in[c], w[o, c])`, same spatial shape.
pub fn conv_forward<T: Real>(input: &TensorField<T>, kernel: &ConvKernel<T>) -> Result<TensorField<T>> {
    check(input, kernel)?;
    let dims = input.dims();
    let s = input.spatial_len();
    let taps = kernel.taps();
    let mut out = TensorField::zeros(kernel.out_channels, dims);
    let out_data = out.data_mut();
    for o in 0..kernel.out_channels {
        out_data[o * s..(o + 1) * s].fill(kernel.bias[o]);
    }
    for o in 0..kernel.out_channels {
        let out_ch = &mut out_data[o * s..(o + 1) * s];
        for c in 0..kernel.in_channels {
            let in_ch = input.channel(c);
            let w = &kernel.weights[(o * kernel.in_channels + c) * taps..(o * kernel.in_channels + c + 1) * taps];
            for_each_tap(dims, kernel.extent, |tap, out_start, in_start, len| {
                let wt = w[tap];
                if wt == T::zero() {
                    return;
                }
                let dst = &mut out_ch[out_start..out_start + len];
                let src = &in_ch[in_start..in_start + len];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            });
        }
    }
    Ok(out)
}

/// Gradients of `conv_forward` w.r.t. its input and kernel (weights and bias),
/// given the gradient of the output.
pub fn conv_backward<T: Real>(
    input: &TensorField<T>,
    kernel: &ConvKernel<T>,
    grad_out: &TensorField<T>,
) -> Result<(TensorField<T>, ConvKernel<T>)> {
    check(input, kernel)?;
    if grad_out.channels() != kernel.out_channels || grad_out.dims() != input.dims() {
        return Err(InnError::Shape("grad_out does not match conv output shape".into()));
    }
    let dims = input.dims();
    let s = input.spatial_len();
    let taps = kernel.taps();
    let mut grad_in = TensorField::zeros(kernel.in_channels, dims);
    let mut grad_k = ConvKernel::zeros(kernel.out_channels, kernel.in_channels, kernel.extent);
    for o in 0..kernel.out_channels {
        grad_k.bias[o] = grad_out.channel(o).iter().copied().sum();
    }
    let gin = grad_in.data_mut();
    for o in 0..kernel.out_channels {
        let gout = grad_out.channel(o);
        for c in 0..kernel.in_channels {
            let in_ch = input.channel(c);
            let base = (o * kernel.in_channels + c) * taps;
            let w = &kernel.weights[base..base + taps];
            let gw = &mut grad_k.weights[base..base + taps];
            let gin_ch = &mut gin[c * s..(c + 1) * s];
            for_each_tap(dims, kernel.extent, |tap, out_start, in_start, len| {
                let g = &gout[out_start..out_start + len];
                let x = &in_ch[in_start..in_start + len];
                let mut acc = T::zero();
                for (&gv, &xv) in g.iter().zip(x) {
                    acc += gv * xv;
                }
                gw[tap] += acc;
                let wt = w[tap];
                if wt != T::zero() {
                    for (d, &gv) in gin_ch[in_start..in_start + len].iter_mut().zip(g) {
                        *d += wt * gv;
                    }
                }
            });
        }
    }
    Ok((grad_in, grad_k))
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<T: Real>(x: &TensorField<T>) -> TensorField<T> {
    let slope = T::of(LEAKY_SLOPE);
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    out
}

/// `grad * lrelu'(pre)`
pub fn leaky_relu_backward<T: Real>(pre: &TensorField<T>, grad: &TensorField<T>) -> TensorField<T> {
    let slope = T::of(LEAKY_SLOPE);
    let mut out = grad.clone();
    for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p < T::zero() {
            *g *= slope;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(c: usize, dims: [usize; 3], rng: &mut impl Rng) -> TensorField<f64> {
        let n = c * dims.iter().product::<usize>();
        TensorField::from_vec(c, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_kernel(o: usize, c: usize, ext: [usize; 3], rng: &mut impl Rng) -> ConvKernel<f64> {
        let mut k = ConvKernel::zeros(o, c, ext);
        k.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        k.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        k
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (dims, ext) in [([6, 1, 5], [3, 1, 3]), ([4, 5, 6], [3, 3, 3])] {
            let x = random_field(3, dims, &mut rng);
            let y = conv_forward(&x, &ConvKernel::identity(3, ext)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(2, 3, [3, 1, 3], &mut rng);
        let y = conv_forward(&TensorField::zeros(3, [5, 1, 5]), &k).unwrap();
        for o in 0..2 {
            assert!(y.channel(o).iter().all(|&v| v == k.bias[o]));
        }
    }

    /// Six nested loops straight from the definition.
    fn naive_conv_2d(x: &[Vec<f64>], w: &[Vec<f64>], bias: f64) -> Vec<Vec<f64>> {
        let n = x.len();
        let m = x[0].len();
        let mut out = vec![vec![bias; m]; n];
        for i in 0..n {
            for k in 0..m {
                for a in 0..3 {
                    for d in 0..3 {
                        let ii = i as isize + a as isize - 1;
                        let kk = k as isize + d as isize - 1;
                        if ii >= 0 && kk >= 0 && (ii as usize) < n && (kk as usize) < m {
                            out[i][k] += w[a][d] * x[ii as usize][kk as usize];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_field(1, [5, 1, 5], &mut rng);
        let k = random_kernel(1, 1, [3, 1, 3], &mut rng);
        let y = conv_forward(&x, &k).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|i| x.data()[i * 5..(i + 1) * 5].to_vec()).collect();
        let ws: Vec<Vec<f64>> = (0..3).map(|a| (0..3).map(|d| k.weight(0, 0, a, 0, d)).collect()).collect();
        let expected = naive_conv_2d(&xs, &ws, k.bias[0]);
        for i in 0..5 {
            for kk in 0..5 {
                assert!((y.data()[i * 5 + kk] - expected[i][kk]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_field(2, [4, 4, 4], &mut rng);
        let k = random_kernel(3, 2, [3, 3, 3], &mut rng);
        let (gi, gk) = conv_backward(&x, &k, &TensorField::zeros(3, [4, 4, 4])).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.weights.iter().chain(&gk.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let x = TensorField::<f64>::zeros(2, [4, 1, 4]);
        assert!(conv_forward(&x, &ConvKernel::zeros(1, 3, [3, 1, 3])).is_err());
        assert!(conv_forward(&TensorField::<f64>::zeros(1, [2, 1, 4]), &ConvKernel::zeros(1, 1, [3, 1, 3])).is_err());
        let k = ConvKernel::<f64>::zeros(1, 2, [3, 1, 3]);
        assert!(conv_backward(&x, &k, &TensorField::zeros(2, [4, 1, 4])).is_err());
        assert!(ConvKernel::<f64>::zeros(1, 1, [2, 1, 3]).validate().is_err());
    }

    #[test]
    fn leaky_relu_slope() {
        let x = TensorField::from_vec(1, [2, 1, 1], vec![-2.0f64, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x).data(), &[-0.2, 3.0]);
        let g = TensorField::from_vec(1, [2, 1, 1], vec![1.0f64, 1.0]).unwrap();
        assert_eq!(leaky_relu_backward(&x, &g).data(), &[0.1, 1.0]);
    }
}
