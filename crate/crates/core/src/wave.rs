//! Acoustic forward model for photoacoustic acquisition.
//!
//! The operator maps an initial pressure field to time series recorded on a
//! planar receiver array. Propagation is a second-order leapfrog scheme with
//! a 7-point (3D) or 5-point (2D) Laplacian and a multiplicative sponge:
//!
//! ```text
//! p[n+1] = g * (2 p[n] - p[n-1] + C^2 L p[n]),    p[-1] = p[0] = x
//! y[n]   = R p[n],                                n = 0 .. nt-1
//! ```
//!
//! `adjoint` is the transpose of exactly this recurrence (sponge included),
//! so the dot-product identity holds to roundoff.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveError {
    #[error("CFL condition violated: c*dt/dx = {courant:.6} exceeds 1/sqrt({dims}) = {limit:.6}")]
    Cfl { courant: f64, limit: f64, dims: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid subsampling: {0}")]
    Subsample(String),
    #[error("noise undefined for an all-zero signal")]
    ZeroSignal,
    #[error("invalid noise spec: {0}")]
    Noise(String),
}

pub type Result<T> = std::result::Result<T, WaveError>;

/// Plain description of a simulation grid, as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dt: f64,
    pub nt: usize,
    pub c: f64,
    pub sponge_width: usize,
    pub sponge_strength: f64,
}

impl Default for GridSpec {
    /// 64 x 1 x 64 cells of 0.1 mm, 128 steps at Courant number 0.5.
    fn default() -> Self {
        GridSpec::with_courant([64, 1, 64], 1e-4, 0.5, 128)
    }
}

fn default_sound_speed() -> f64 {
    1500.0
}

fn default_sponge_width() -> usize {
    8
}

fn default_sponge_strength() -> f64 {
    0.05
}

impl GridSpec {
    /// Grid with the default medium (c = 1500 m/s) and sponge, and a time
    /// step chosen so that `c*dt/dx == courant`.
    pub fn with_courant(dims: [usize; 3], dx: f64, courant: f64, nt: usize) -> Self {
        let c = default_sound_speed();
        GridSpec {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            dx,
            dt: courant * dx / c,
            nt,
            c,
            sponge_width: default_sponge_width(),
            sponge_strength: default_sponge_strength(),
        }
    }

    pub fn sponge(mut self, width: usize, strength: f64) -> Self {
        self.sponge_width = width;
        self.sponge_strength = strength;
        self
    }
}

/// Validated discretization defining the linear operator.
///
/// `ny == 1` selects the 2D kernels (propagation in the x-z plane).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimGrid {
    spec: GridSpec,
}

impl TryFrom<GridSpec> for SimGrid {
    type Error = WaveError;

    fn try_from(spec: GridSpec) -> Result<Self> {
        SimGrid::new(spec)
    }
}

impl SimGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let GridSpec { nx, ny, nz, dx, dt, nt, c, sponge_width, sponge_strength } = spec;
        if nx == 0 || ny == 0 || nz == 0 || nt == 0 {
            return Err(WaveError::InvalidGrid(format!(
                "grid counts must be positive, got ({nx}, {ny}, {nz}) with nt = {nt}"
            )));
        }
        if !(dx.is_finite() && dx > 0.0 && dt.is_finite() && dt > 0.0 && c.is_finite() && c > 0.0) {
            return Err(WaveError::InvalidGrid("dx, dt and c must be positive and finite".into()));
        }
        if !(sponge_strength.is_finite() && (0.0..1.0).contains(&sponge_strength)) {
            return Err(WaveError::InvalidGrid(format!(
                "sponge_strength must lie in [0, 1), got {sponge_strength}"
            )));
        }
        let min_extent = 2 * sponge_width + 4;
        let lateral_y_ok = ny == 1 || ny >= min_extent;
        if nx < min_extent || nz < min_extent || !lateral_y_ok {
            return Err(WaveError::InvalidGrid(format!(
                "each axis needs at least 2*sponge_width + 4 = {min_extent} points (ny = 1 selects 2D), got ({nx}, {ny}, {nz})"
            )));
        }
        let dims = if ny == 1 { 2 } else { 3 };
        let courant = c * dt / dx;
        let limit = 1.0 / (dims as f64).sqrt();
        if courant > limit {
            return Err(WaveError::Cfl { courant, limit, dims });
        }
        Ok(SimGrid { spec })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.spec.nx, self.spec.ny, self.spec.nz]
    }

    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn nz(&self) -> usize {
        self.spec.nz
    }

    pub fn nt(&self) -> usize {
        self.spec.nt
    }

    pub fn sponge_width(&self) -> usize {
        self.spec.sponge_width
    }

    pub fn is_2d(&self) -> bool {
        self.spec.ny == 1
    }

    pub fn n_points(&self) -> usize {
        self.spec.nx * self.spec.ny * self.spec.nz
    }

    pub fn courant(&self) -> f64 {
        self.spec.c * self.spec.dt / self.spec.dx
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.spec.ny + j) * self.spec.nz + k
    }

    /// Depth index of the receiver plane: the first plane inside the sponge.
    pub fn receiver_plane(&self) -> usize {
        self.spec.sponge_width
    }

    /// Per-point multiplicative damping factor `g` in (0, 1].
    ///
    /// Along each damped axis the attenuation is a cosine taper reaching
    /// `sponge_strength` at the outermost cell; factors multiply across axes.
    pub fn damping(&self) -> Vec<f64> {
        let w = self.spec.sponge_width;
        let s = self.spec.sponge_strength;
        let taper = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let from_edge = i.min(n - 1 - i);
                    if n == 1 || w == 0 || from_edge >= w {
                        1.0
                    } else {
                        let t = (w - from_edge) as f64 / w as f64;
                        1.0 - s * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
                    }
                })
                .collect()
        };
        let (gx, gy, gz) = (taper(self.spec.nx), taper(self.spec.ny), taper(self.spec.nz));
        let mut g = Vec::with_capacity(self.n_points());
        for &ax in &gx {
            for &ay in &gy {
                for &az in &gz {
                    g.push(ax * ay * az);
                }
            }
        }
        g
    }
}

/// Scalar field on the full simulation grid (initial pressure, gradients,
/// reconstructions).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: &SimGrid) -> Self {
        Volume { dims: grid.dims(), values: vec![0.0; grid.n_points()] }
    }

    pub fn from_vec(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if values.len() != n {
            return Err(WaveError::Shape {
                expected: format!("{n} values for {dims:?}"),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WaveError::NonFinite("volume"));
        }
        Ok(Volume { dims, values })
    }

    pub fn for_grid(grid: &SimGrid, values: Vec<f64>) -> Result<Self> {
        Self::from_vec(grid.dims(), values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn scaled(&self, a: f64) -> Volume {
        Volume { dims: self.dims, values: self.values.iter().map(|v| a * v).collect() }
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_grid(&self, grid: &SimGrid) -> Result<()> {
        if self.dims != grid.dims() {
            return Err(WaveError::Shape {
                expected: format!("{:?}", grid.dims()),
                got: format!("{:?}", self.dims),
            });
        }
        Ok(())
    }
}

/// Receiver decimation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleScheme {
    /// Keep every `factor`-th receiver along each lateral axis.
    PerAxis,
    /// Reduce the receiver count by `factor` overall, splitting the stride
    /// evenly over the lateral axes.
    #[default]
    Total,
}

/// Planar receiver array at depth `plane_z`, covering the full lateral extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverGeometry {
    nx: usize,
    ny: usize,
    plane_z: usize,
    mask: Vec<bool>,
    subsample_factor: usize,
    scheme: SubsampleScheme,
}

impl ReceiverGeometry {
    pub fn full(grid: &SimGrid) -> Self {
        ReceiverGeometry {
            nx: grid.nx(),
            ny: grid.ny(),
            plane_z: grid.receiver_plane(),
            mask: vec![true; grid.nx() * grid.ny()],
            subsample_factor: 1,
            scheme: SubsampleScheme::Total,
        }
    }

    /// Geometry with an explicit mask of shape (nx, ny), row-major.
    pub fn with_mask(grid: &SimGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.nx() * grid.ny() {
            return Err(WaveError::Shape {
                expected: format!("mask of {} entries", grid.nx() * grid.ny()),
                got: format!("{}", mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(WaveError::Subsample("mask has no active receiver".into()));
        }
        Ok(ReceiverGeometry {
            nx: grid.nx(),
            ny: grid.ny(),
            plane_z: grid.receiver_plane(),
            mask,
            subsample_factor: 1,
            scheme: SubsampleScheme::Total,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn subsample_factor(&self) -> usize {
        self.subsample_factor
    }

    pub fn scheme(&self) -> SubsampleScheme {
        self.scheme
    }

    pub fn plane_z(&self) -> usize {
        self.plane_z
    }

    /// Flat grid indices of the active receivers, in mask order.
    pub fn receiver_indices(&self, grid: &SimGrid) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_active());
        for i in 0..self.nx {
            for j in 0..self.ny {
                if self.mask[i * self.ny + j] {
                    out.push(grid.index(i, j, self.plane_z));
                }
            }
        }
        out
    }

    /// Zero every inactive receiver of a full-plane field of shape (nx, ny).
    pub fn restrict_plane(&self, plane: &mut [f64]) {
        for (v, &m) in plane.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    fn check_grid(&self, grid: &SimGrid) -> Result<()> {
        if self.nx != grid.nx() || self.ny != grid.ny() || self.plane_z != grid.receiver_plane() {
            return Err(WaveError::Shape {
                expected: format!("plane {}x{} at z = {}", grid.nx(), grid.ny(), grid.receiver_plane()),
                got: format!("plane {}x{} at z = {}", self.nx, self.ny, self.plane_z),
            });
        }
        Ok(())
    }
}

/// Regularly decimated receiver plane.
///
/// With `Total`, the per-axis stride is the `d`-th root of `factor` where `d`
/// is the number of lateral axes (2 in 3D, 1 in 2D), so a factor of 4 keeps
/// every 2nd receiver along x and y in 3D. `PerAxis` uses `factor` itself as
/// the stride on every lateral axis. Receivers sit at multiples of the stride.
pub fn make_subsampled_geometry(
    grid: &SimGrid,
    factor: usize,
    scheme: SubsampleScheme,
) -> Result<ReceiverGeometry> {
    if factor == 0 {
        return Err(WaveError::Subsample("factor must be at least 1".into()));
    }
    let lateral_axes = if grid.is_2d() { 1 } else { 2 };
    let stride = match scheme {
        SubsampleScheme::PerAxis => factor,
        SubsampleScheme::Total => {
            let root = (factor as f64).powf(1.0 / lateral_axes as f64).round() as usize;
            if root.pow(lateral_axes) != factor {
                return Err(WaveError::Subsample(format!(
                    "total factor {factor} is not a perfect power of the {lateral_axes} lateral axes"
                )));
            }
            root
        }
    };
    let (nx, ny) = (grid.nx(), grid.ny());
    if stride > nx || (ny > 1 && stride > ny) {
        return Err(WaveError::Subsample(format!(
            "stride {stride} exceeds the {nx}x{ny} receiver plane"
        )));
    }
    let mut mask = vec![false; nx * ny];
    for i in (0..nx).step_by(stride) {
        if ny == 1 {
            mask[i] = true;
        } else {
            for j in (0..ny).step_by(stride) {
                mask[i * ny + j] = true;
            }
        }
    }
    Ok(ReceiverGeometry {
        nx,
        ny,
        plane_z: grid.receiver_plane(),
        mask,
        subsample_factor: factor,
        scheme,
    })
}

/// Receiver time series, shape (n_active, nt), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    geometry: ReceiverGeometry,
    nt: usize,
    values: Vec<f64>,
}

impl Traces {
    pub fn zeros(geometry: &ReceiverGeometry, nt: usize) -> Self {
        Traces { geometry: geometry.clone(), nt, values: vec![0.0; geometry.n_active() * nt] }
    }

    pub fn from_vec(geometry: &ReceiverGeometry, nt: usize, values: Vec<f64>) -> Result<Self> {
        let n = geometry.n_active() * nt;
        if values.len() != n {
            return Err(WaveError::Shape {
                expected: format!("{} receivers x {nt} samples", geometry.n_active()),
                got: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WaveError::NonFinite("traces"));
        }
        Ok(Traces { geometry: geometry.clone(), nt, values })
    }

    pub fn geometry(&self) -> &ReceiverGeometry {
        &self.geometry
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn n_receivers(&self) -> usize {
        self.geometry.n_active()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn trace(&self, r: usize) -> &[f64] {
        &self.values[r * self.nt..(r + 1) * self.nt]
    }

    pub fn dot(&self, other: &Traces) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn rms(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        (self.dot(self) / self.values.len() as f64).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Traces {
        Traces {
            geometry: self.geometry.clone(),
            nt: self.nt,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }
}

/// Target SNR and seed of the additive Gaussian noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// sigma = rms(signal) / 10^(snr_db / 20)
    pub fn sigma(&self, signal_rms: f64) -> f64 {
        signal_rms / 10f64.powf(self.snr_db / 20.0)
    }
}

/// `y + eps` with `eps ~ N(0, sigma^2 I)` drawn from a ChaCha8 stream seeded
/// by `spec.seed`.
pub fn add_noise(y: &Traces, spec: &NoiseSpec) -> Result<Traces> {
    if !spec.snr_db.is_finite() {
        return Err(WaveError::Noise(format!("snr_db must be finite, got {}", spec.snr_db)));
    }
    let rms = y.rms();
    if rms == 0.0 {
        return Err(WaveError::ZeroSignal);
    }
    let sigma = spec.sigma(rms);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values = y
        .values
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + sigma * e
        })
        .collect();
    Ok(Traces { geometry: y.geometry.clone(), nt: y.nt, values })
}

/// Thread-safe tally of PDE solves issued through an operator handle.
#[derive(Debug, Default)]
pub struct SolveCounter {
    forward: AtomicU64,
    adjoint: AtomicU64,
}

impl SolveCounter {
    pub fn forward_count(&self) -> u64 {
        self.forward.load(Ordering::SeqCst)
    }

    pub fn adjoint_count(&self) -> u64 {
        self.adjoint.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.forward_count() + self.adjoint_count()
    }

    pub fn snapshot(&self) -> SolveTally {
        SolveTally { forward: self.forward_count(), adjoint: self.adjoint_count() }
    }

    fn bump_forward(&self) {
        self.forward.fetch_add(1, Ordering::SeqCst);
    }

    fn bump_adjoint(&self) {
        self.adjoint.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolveTally {
    pub forward: u64,
    pub adjoint: u64,
}

impl SolveTally {
    pub fn total(&self) -> u64 {
        self.forward + self.adjoint
    }

    pub fn since(&self, earlier: SolveTally) -> SolveTally {
        SolveTally { forward: self.forward - earlier.forward, adjoint: self.adjoint - earlier.adjoint }
    }
}

/// Dense-vector linear map with an adjoint. LSQR and the dense test oracles
/// go through this interface only.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = A x`
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = A^T y`
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);
}

/// The operator `A = R P` for one grid and receiver geometry.
#[derive(Debug, Clone)]
pub struct WaveOperator {
    grid: SimGrid,
    geometry: ReceiverGeometry,
    damping: Vec<f64>,
    receivers: Vec<usize>,
    counter: Arc<SolveCounter>,
    sabotage_adjoint: bool,
}

impl WaveOperator {
    pub fn new(grid: &SimGrid, geometry: &ReceiverGeometry) -> Result<Self> {
        geometry.check_grid(grid)?;
        Ok(WaveOperator {
            grid: grid.clone(),
            geometry: geometry.clone(),
            damping: grid.damping(),
            receivers: geometry.receiver_indices(grid),
            counter: Arc::new(SolveCounter::default()),
            sabotage_adjoint: false,
        })
    }

    /// Negative control for diagnostics: drops the `p[-1]` contribution from
    /// the adjoint so the dot-product test must fail.
    #[doc(hidden)]
    pub fn sabotaged(mut self) -> Self {
        self.sabotage_adjoint = true;
        self
    }

    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &ReceiverGeometry {
        &self.geometry
    }

    pub fn counter(&self) -> &SolveCounter {
        &self.counter
    }

    pub fn shared_counter(&self) -> Arc<SolveCounter> {
        Arc::clone(&self.counter)
    }

    /// Same physics with a different receiver geometry; shares this handle's counter.
    pub fn with_geometry(&self, geometry: &ReceiverGeometry) -> Result<Self> {
        geometry.check_grid(&self.grid)?;
        Ok(WaveOperator {
            geometry: geometry.clone(),
            receivers: geometry.receiver_indices(&self.grid),
            ..self.clone()
        })
    }

    pub fn forward(&self, x: &Volume) -> Result<Traces> {
        x.check_grid(&self.grid)?;
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(WaveError::NonFinite("forward input"));
        }
        let mut out = vec![0.0; self.receivers.len() * self.grid.nt()];
        self.forward_raw(&x.values, &mut out);
        Ok(Traces { geometry: self.geometry.clone(), nt: self.grid.nt(), values: out })
    }

    pub fn adjoint(&self, y: &Traces) -> Result<Volume> {
        if y.geometry != self.geometry || y.nt != self.grid.nt() {
            return Err(WaveError::Shape {
                expected: format!("{} receivers x {} samples", self.receivers.len(), self.grid.nt()),
                got: format!("{} receivers x {} samples", y.n_receivers(), y.nt),
            });
        }
        if y.values.iter().any(|v| !v.is_finite()) {
            return Err(WaveError::NonFinite("adjoint input"));
        }
        let mut out = vec![0.0; self.grid.n_points()];
        self.adjoint_raw(&y.values, &mut out);
        Ok(Volume { dims: self.grid.dims(), values: out })
    }

    /// `A^T (A x - y)`: one forward and one adjoint solve.
    pub fn misfit_gradient(&self, x: &Volume, y_obs: &Traces) -> Result<Volume> {
        self.misfit_and_gradient(x, y_obs).map(|(_, g)| g)
    }

    /// Misfit `0.5 * ||A x - y||^2` together with its gradient, at the cost of
    /// the same two solves.
    pub fn misfit_and_gradient(&self, x: &Volume, y_obs: &Traces) -> Result<(f64, Volume)> {
        if y_obs.geometry != self.geometry {
            return Err(WaveError::Shape {
                expected: format!("{} active receivers", self.receivers.len()),
                got: format!("{} active receivers", y_obs.n_receivers()),
            });
        }
        let mut residual = self.forward(x)?;
        for (r, o) in residual.values.iter_mut().zip(&y_obs.values) {
            *r -= o;
        }
        let misfit = 0.5 * residual.dot(&residual);
        let grad = self.adjoint(&residual)?;
        Ok((misfit, grad))
    }

    /// Run the forward recurrence, calling `visit(n, p[n])` for n = 0 .. nt-1.
    /// Does not count as a solve.
    pub fn propagate(&self, x: &Volume, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        x.check_grid(&self.grid)?;
        let n = self.grid.n_points();
        let mut prev = x.values.clone();
        let mut cur = x.values.clone();
        let mut next = vec![0.0; n];
        visit(0, &cur);
        for step in 1..self.grid.nt() {
            leapfrog(&self.grid, &cur, &prev, &mut next);
            for (v, g) in next.iter_mut().zip(&self.damping) {
                *v *= g;
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut next);
            visit(step, &cur);
        }
        Ok(())
    }

    fn forward_raw(&self, x: &[f64], out: &mut [f64]) {
        self.counter.bump_forward();
        let nt = self.grid.nt();
        let n = self.grid.n_points();
        let mut prev = x.to_vec();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; n];
        for (r, &idx) in self.receivers.iter().enumerate() {
            out[r * nt] = cur[idx];
        }
        for step in 1..nt {
            leapfrog(&self.grid, &cur, &prev, &mut next);
            for (v, g) in next.iter_mut().zip(&self.damping) {
                *v *= g;
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut next);
            for (r, &idx) in self.receivers.iter().enumerate() {
                out[r * nt + step] = cur[idx];
            }
        }
    }

    // Transpose of `forward_raw`. With q[n] the adjoint state of p[n]:
    //   q[n] = R^T y[n] + (2 + C^2 L)(g q[n+1]) - g q[n+2],   q[nt] = q[nt+1] = 0
    //   A^T y = q[0] - g q[1]          (the second term is the p[-1] = x path)
    fn adjoint_raw(&self, y: &[f64], out: &mut [f64]) {
        self.counter.bump_adjoint();
        let nt = self.grid.nt();
        let n = self.grid.n_points();
        let mut r1 = vec![0.0; n];
        let mut r2 = vec![0.0; n];
        let mut q = vec![0.0; n];
        for step in (0..nt).rev() {
            leapfrog(&self.grid, &r1, &r2, &mut q);
            for (r, &idx) in self.receivers.iter().enumerate() {
                q[idx] += y[r * nt + step];
            }
            if step == 0 {
                if self.sabotage_adjoint {
                    out.copy_from_slice(&q);
                } else {
                    for ((o, qv), rv) in out.iter_mut().zip(&q).zip(&r1) {
                        *o = qv - rv;
                    }
                }
                return;
            }
            std::mem::swap(&mut r2, &mut r1);
            for ((dst, qv), g) in r1.iter_mut().zip(&q).zip(&self.damping) {
                *dst = g * qv;
            }
        }
    }
}

impl LinearOperator for WaveOperator {
    fn nrows(&self) -> usize {
        self.receivers.len() * self.grid.nt()
    }

    fn ncols(&self) -> usize {
        self.grid.n_points()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols());
        assert_eq!(out.len(), self.nrows());
        self.forward_raw(x, out);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.nrows());
        assert_eq!(out.len(), self.ncols());
        self.adjoint_raw(y, out);
    }
}

/// `out = 2 cur + C^2 L cur - prev`, with zero Dirichlet ghosts outside the grid.
fn leapfrog(grid: &SimGrid, cur: &[f64], prev: &[f64], out: &mut [f64]) {
    let (nx, ny, nz) = (grid.nx(), grid.ny(), grid.nz());
    let c2 = grid.courant() * grid.courant();
    let centre = if ny == 1 { 4.0 } else { 6.0 };
    let sx = ny * nz;
    for i in 0..nx {
        for j in 0..ny {
            let row = (i * ny + j) * nz;
            for k in 0..nz {
                let idx = row + k;
                let mut lap = -centre * cur[idx];
                if k > 0 {
                    lap += cur[idx - 1];
                }
                if k + 1 < nz {
                    lap += cur[idx + 1];
                }
                if i > 0 {
                    lap += cur[idx - sx];
                }
                if i + 1 < nx {
                    lap += cur[idx + sx];
                }
                if ny > 1 {
                    if j > 0 {
                        lap += cur[idx - nz];
                    }
                    if j + 1 < ny {
                        lap += cur[idx + nz];
                    }
                }
                out[idx] = 2.0 * cur[idx] + c2 * lap - prev[idx];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
