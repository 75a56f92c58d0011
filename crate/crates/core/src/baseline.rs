//! Matrix-free LSQR (Paige & Saunders) for `min ||A x - b||_2`.
//!
//! The solver only sees `A` through [`LinearOperator`]. Solve accounting for
//! the wave operator: one adjoint to start the bidiagonalization, then one
//! forward and one adjoint per iteration.

use serde::{Deserialize, Serialize};

use crate::wave::{LinearOperator, SolveTally, Traces, Volume, WaveOperator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsqrOptions {
    pub max_iters: usize,
    pub atol: f64,
    pub btol: f64,
    pub record_residuals: bool,
}

impl Default for LsqrOptions {
    fn default() -> Self {
        LsqrOptions { max_iters: 30, atol: 1e-8, btol: 1e-8, record_residuals: true }
    }
}

impl LsqrOptions {
    /// Exactly `max_iters` iterations, no tolerance-based stop.
    pub fn fixed(max_iters: usize) -> Self {
        LsqrOptions { max_iters, atol: 0.0, btol: 0.0, record_residuals: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Right-hand side is zero; `x = 0` is exact.
    ZeroRhs,
    IterationLimit,
    /// `||r|| / ||b||` below `btol + atol ||A|| ||x|| / ||b||`.
    ResidualTolerance,
    /// `||A^T r|| / (||A|| ||r||)` below `atol`.
    LeastSquaresTolerance,
    /// A bidiagonalization norm vanished; the current iterate is returned.
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct LsqrResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual estimates `||A x_k - b|| / ||b||`, entry `k` after
    /// iteration `k` (entry 0 is 1). Empty unless recording was requested.
    pub residual_history: Vec<f64>,
    pub stop: StopReason,
}

impl LsqrResult {
    pub fn breakdown(&self) -> bool {
        self.stop == StopReason::Breakdown
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale(v: &mut [f64], a: f64) {
    v.iter_mut().for_each(|x| *x *= a);
}

pub fn lsqr(op: &impl LinearOperator, b: &[f64], opts: &LsqrOptions) -> LsqrResult {
    let (m, n) = (op.nrows(), op.ncols());
    assert_eq!(b.len(), m, "right-hand side length must equal operator rows");
    let mut x = vec![0.0; n];
    let mut history = Vec::new();

    let mut u = b.to_vec();
    let mut beta = norm(&u);
    let bnorm = beta;
    if beta == 0.0 {
        if opts.record_residuals {
            history.push(0.0);
        }
        return LsqrResult { x, iterations: 0, residual_history: history, stop: StopReason::ZeroRhs };
    }
    scale(&mut u, 1.0 / beta);
    let mut v = vec![0.0; n];
    op.apply_adjoint(&u, &mut v);
    let mut alpha = norm(&v);
    if opts.record_residuals {
        history.push(1.0);
    }
    if alpha == 0.0 {
        return LsqrResult { x, iterations: 0, residual_history: history, stop: StopReason::Breakdown };
    }
    scale(&mut v, 1.0 / alpha);

    let mut w = v.clone();
    let mut phibar = beta;
    let mut rhobar = alpha;
    let mut anorm_sq = 0.0;
    let mut av = vec![0.0; m];
    let mut atu = vec![0.0; n];
    let mut stop = StopReason::IterationLimit;
    let mut iterations = 0;

    for it in 1..=opts.max_iters {
        iterations = it;
        // u <- A v - alpha u
        op.apply(&v, &mut av);
        for (ui, ai) in u.iter_mut().zip(&av) {
            *ui = ai - alpha * *ui;
        }
        beta = norm(&u);
        anorm_sq += alpha * alpha + beta * beta;
        if beta > 0.0 {
            scale(&mut u, 1.0 / beta);
            // v <- A^T u - beta v
            op.apply_adjoint(&u, &mut atu);
            for (vi, ai) in v.iter_mut().zip(&atu) {
                *vi = ai - beta * *vi;
            }
            alpha = norm(&v);
            if alpha > 0.0 {
                scale(&mut v, 1.0 / alpha);
            }
        } else {
            alpha = 0.0;
        }

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let step = phi / rho;
        let wscale = theta / rho;
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += step * *wi;
            *wi = vi - wscale * *wi;
        }
        if opts.record_residuals {
            history.push(phibar / bnorm);
        }

        if beta == 0.0 || alpha == 0.0 {
            stop = StopReason::Breakdown;
            break;
        }
        let anorm = anorm_sq.sqrt();
        let xnorm = norm(&x);
        let arnorm = phibar * alpha * c.abs();
        if phibar / bnorm <= opts.btol + opts.atol * anorm * xnorm / bnorm {
            stop = StopReason::ResidualTolerance;
            break;
        }
        if arnorm / (anorm * phibar) <= opts.atol {
            stop = StopReason::LeastSquaresTolerance;
            break;
        }
    }
    LsqrResult { x, iterations, residual_history: history, stop }
}

/// LSQR reconstruction of an initial-pressure volume from receiver traces.
#[derive(Debug, Clone)]
pub struct WaveLsqr {
    pub volume: Volume,
    pub result: LsqrResult,
    /// Solves issued by this call, initialization included.
    pub solves: SolveTally,
}

impl WaveLsqr {
    /// Solves spent inside the iteration loop (two per iteration).
    pub fn body_solves(&self) -> u64 {
        let init = if self.result.stop == StopReason::ZeroRhs { 0 } else { 1 };
        self.solves.total() - init
    }
}

pub fn lsqr_wave(op: &WaveOperator, y_obs: &Traces, opts: &LsqrOptions) -> crate::wave::Result<WaveLsqr> {
    // shape and finiteness checks without spending a solve
    if y_obs.geometry() != op.geometry() || y_obs.nt() != op.grid().nt() {
        return Err(crate::wave::WaveError::Shape {
            expected: format!("{} receivers x {} samples", op.geometry().n_active(), op.grid().nt()),
            got: format!("{} receivers x {} samples", y_obs.n_receivers(), y_obs.nt()),
        });
    }
    let before = op.counter().snapshot();
    let result = lsqr(op, y_obs.values(), opts);
    let solves = op.counter().snapshot().since(before);
    let volume = Volume::for_grid(op.grid(), result.x.clone())?;
    Ok(WaveLsqr { volume, result, solves })
}
