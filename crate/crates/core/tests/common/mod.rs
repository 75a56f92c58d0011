//! Test-only references shared by the integration suites.
#![allow(dead_code)]

use pat_core::inn::{
    conv_backward, conv_forward, init_params, leaky_relu, leaky_relu_backward, squeeze, unsqueeze, ArchSpec,
    Real, StageOp, StageParams, TensorField,
};
use pat_core::wave::LinearOperator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_field<T: Real>(channels: usize, dims: [usize; 3], rng: &mut impl Rng) -> TensorField<T> {
    let n = channels * dims.iter().product::<usize>();
    TensorField::from_vec(channels, dims, (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// Freshly initialized stage whose (zero) second convs are replaced by
/// He-scaled random weights times `scale`, and all biases randomized.
pub fn random_stage(arch: &ArchSpec, two_d: bool, seed: u64, scale: f64) -> StageParams<f64> {
    let mut p: StageParams<f64> = init_params(arch, two_d, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in &mut p.layers {
        let fan_in = (layer.conv2.in_channels * layer.conv2.extent.iter().product::<usize>()) as f64;
        let bound = scale * (6.0 / fan_in).sqrt();
        layer.conv2.weights.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        layer.conv2.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        layer.conv1.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    p
}

struct StoredLayer<T> {
    input: TensorField<T>,
    concat: TensorField<T>,
    pre: TensorField<T>,
    act: TensorField<T>,
}

/// Conventional backpropagation: run the stage forward keeping every
/// intermediate, then walk back using the stored values. Returns the
/// gradient w.r.t. the stage input and the parameter gradients.
pub fn stored_activation_backward<T: Real>(
    input: &TensorField<T>,
    grad_out: &TensorField<T>,
    grad_field: &TensorField<T>,
    params: &StageParams<T>,
) -> (TensorField<T>, StageParams<T>) {
    let mut conds = vec![grad_field.scaled(T::of(params.cond_scale))];
    let levels = params.layer_levels().unwrap();
    while conds.len() <= *levels.iter().max().unwrap() {
        let next = squeeze(conds.last().unwrap()).unwrap();
        conds.push(next);
    }

    let mut stored: Vec<Option<StoredLayer<T>>> = Vec::new();
    let mut cur = input.clone();
    for op in params.ops() {
        match op {
            StageOp::Squeeze => {
                cur = squeeze(&cur).unwrap();
                stored.push(None);
            }
            StageOp::Unsqueeze => {
                cur = unsqueeze(&cur, params.two_d).unwrap();
                stored.push(None);
            }
            StageOp::Layer(l) => {
                let layer = &params.layers[l];
                let half = layer.half();
                let (kept, upd) = layer.parity.offsets(half);
                let concat = TensorField::concat(&[&cur.channel_block(kept, half), &conds[levels[l]]]).unwrap();
                let pre = conv_forward(&concat, &layer.conv1).unwrap();
                let act = leaky_relu(&pre);
                let f = conv_forward(&act, &layer.conv2).unwrap();
                let mut next = cur.clone();
                let mut updated = next.channel_block(upd, half);
                updated.add_assign(&f);
                next.set_channel_block(upd, &updated);
                stored.push(Some(StoredLayer { input: cur, concat, pre, act }));
                cur = next;
            }
        }
    }

    let mut grads = params.zeros_like();
    let mut g = grad_out.clone();
    for (op, rec) in params.ops().into_iter().zip(stored).rev() {
        match op {
            StageOp::Squeeze => g = unsqueeze(&g, params.two_d).unwrap(),
            StageOp::Unsqueeze => g = squeeze(&g).unwrap(),
            StageOp::Layer(l) => {
                let rec = rec.unwrap();
                let layer = &params.layers[l];
                let half = layer.half();
                let (kept, upd) = layer.parity.offsets(half);
                assert_eq!(rec.input.channels(), 2 * half);
                let g_upd = g.channel_block(upd, half);
                let (g_act, g2) = conv_backward(&rec.act, &layer.conv2, &g_upd).unwrap();
                let g_pre = leaky_relu_backward(&rec.pre, &g_act);
                let (g_concat, g1) = conv_backward(&rec.concat, &layer.conv1, &g_pre).unwrap();
                let mut g_kept = g.channel_block(kept, half);
                g_kept.add_assign(&g_concat.channel_block(0, half));
                g.set_channel_block(kept, &g_kept);
                let gl = &mut grads.layers[l];
                gl.conv1 = g1;
                gl.conv2 = g2;
            }
        }
    }
    (g, grads)
}

/// Largest absolute difference over the whole buffer, divided by the largest
/// reference magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Row-major dense matrix behind the same interface the wave operator uses.
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl LinearOperator for Dense {
    fn nrows(&self) -> usize {
        self.rows
    }
    fn ncols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            out[i] = (0..self.cols).map(|j| self.a[i * self.cols + j] * x[j]).sum();
        }
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        for j in 0..self.cols {
            out[j] = (0..self.rows).map(|i| self.a[i * self.cols + j] * y[i]).sum();
        }
    }
}

/// (A^T A)^{-1} A^T b by Gaussian elimination with partial pivoting.
pub fn normal_equations(m: &Dense, b: &[f64]) -> Vec<f64> {
    let n = m.cols;
    let mut g = vec![vec![0.0; n + 1]; n];
    for r in 0..n {
        for c in 0..n {
            g[r][c] = (0..m.rows).map(|i| m.a[i * n + r] * m.a[i * n + c]).sum();
        }
        g[r][n] = (0..m.rows).map(|i| m.a[i * n + r] * b[i]).sum();
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| g[p][col].abs().total_cmp(&g[q][col].abs())).unwrap();
        g.swap(col, piv);
        for r in col + 1..n {
            let f = g[r][col] / g[col][col];
            for c in col..=n {
                g[r][c] -= f * g[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| g[r][c] * x[c]).sum();
        x[r] = (g[r][n] - s) / g[r][r];
    }
    x
}
