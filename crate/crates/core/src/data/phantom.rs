//! Procedural vessel phantoms: branching random-walk tubes with a truncated
//! Gaussian cross-section, rendered inside the sponge-free interior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::wave::{SimGrid, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_vessels: usize,
    /// Tube radius range in cells.
    pub radius_range: (f64, f64),
    /// Standard deviation of the per-step direction perturbation.
    pub curvature: f64,
    /// Probability per step of spawning a branch.
    pub branch_prob: f64,
    pub intensity_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_vessels: 3,
            radius_range: (1.0, 2.0),
            curvature: 0.15,
            branch_prob: 0.01,
            intensity_range: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.radius_range;
        let (i0, i1) = self.intensity_range;
        if !(r0.is_finite() && r1.is_finite() && r0 > 0.0 && r0 <= r1) {
            return Err(DataError::Phantom(format!("radius_range must satisfy 0 < min <= max, got ({r0}, {r1})")));
        }
        if !(i0.is_finite() && i1.is_finite() && i0 > 0.0 && i0 <= i1) {
            return Err(DataError::Phantom(format!("intensity_range must satisfy 0 < min <= max, got ({i0}, {i1})")));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(DataError::Phantom(format!("branch_prob must lie in [0, 1], got {}", self.branch_prob)));
        }
        if !(self.curvature.is_finite() && self.curvature >= 0.0) {
            return Err(DataError::Phantom(format!("curvature must be finite and nonnegative, got {}", self.curvature)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }
}

struct Walker {
    pos: [f64; 3],
    dir: [f64; 3],
    radius: f64,
    intensity: f64,
}

const STEP: f64 = 0.5;
const BRANCH_SHRINK: f64 = 0.7;

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_direction(rng: &mut ChaCha8Rng, two_d: bool) -> [f64; 3] {
    let mut d = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
    if two_d {
        d[1] = 0.0;
    }
    normalize(d)
}

pub fn gen_phantom(grid: &SimGrid, spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = grid.dims();
    let two_d = grid.is_2d();
    let w = grid.sponge_width();
    // interior box [lo, hi) per axis; y is unrestricted in 2D
    let lo = [w, if two_d { 0 } else { w }, w];
    let hi = [dims[0] - w, if two_d { 1 } else { dims[1] - w }, dims[2] - w];
    let r_max = spec.radius_range.1;
    for a in 0..3 {
        if two_d && a == 1 {
            continue;
        }
        if ((hi[a] - lo[a]) as f64) < 2.0 * r_max + 1.0 {
            return Err(DataError::Phantom(format!(
                "interior extent {} along axis {a} cannot hold radius {r_max}",
                hi[a] - lo[a]
            )));
        }
    }

    let mut vol = Volume::zeros(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // each tube is at most as long as the widest interior extent
    let max_steps = (0..3).map(|a| hi[a] - lo[a]).max().unwrap_or(0) * (1.0 / STEP) as usize;
    let max_walkers = 8 * spec.n_vessels;
    let inside = |p: &[f64; 3]| (0..3).all(|a| p[a] >= lo[a] as f64 && p[a] <= (hi[a] - 1) as f64);

    let mut pending: Vec<Walker> = Vec::new();
    for _ in 0..spec.n_vessels {
        let mut pos = [0.0; 3];
        for a in 0..3 {
            pos[a] = if two_d && a == 1 { 0.0 } else { rng.gen_range(lo[a] as f64..(hi[a] - 1) as f64) };
        }
        pending.push(Walker {
            pos,
            dir: random_direction(&mut rng, two_d),
            radius: rng.gen_range(spec.radius_range.0..=spec.radius_range.1),
            intensity: rng.gen_range(spec.intensity_range.0..=spec.intensity_range.1),
        });
    }
    let mut spawned = pending.len();
    // walkers are processed in a fixed order, so the result is seed-deterministic
    let mut queue = std::collections::VecDeque::from(pending);
    while let Some(mut walker) = queue.pop_front() {
        for _ in 0..max_steps {
            if !inside(&walker.pos) {
                break;
            }
            splat(&mut vol, grid, &walker, lo, hi);
            if spawned < max_walkers && rng.gen::<f64>() < spec.branch_prob {
                let radius = (walker.radius * BRANCH_SHRINK).max(spec.radius_range.0);
                let mut dir = random_direction(&mut rng, two_d);
                for a in 0..3 {
                    dir[a] += walker.dir[a];
                }
                queue.push_back(Walker { pos: walker.pos, dir: normalize(dir), radius, intensity: walker.intensity });
                spawned += 1;
            }
            let mut dir = walker.dir;
            for (a, d) in dir.iter_mut().enumerate() {
                if !(two_d && a == 1) {
                    *d += spec.curvature * rng.sample::<f64, _>(StandardNormal);
                }
            }
            walker.dir = normalize(dir);
            for a in 0..3 {
                walker.pos[a] += STEP * walker.dir[a];
            }
        }
    }
    Ok(vol)
}

/// Max-composite one tube sample centred on the nearest voxel.
fn splat(vol: &mut Volume, grid: &SimGrid, walker: &Walker, lo: [usize; 3], hi: [usize; 3]) {
    let centre = walker.pos.map(|p| p.round() as isize);
    let r = walker.radius;
    let reach = r.ceil() as isize;
    let inv = 2.0 / (r * r);
    let range = |a: usize| {
        let from = (centre[a] - reach).max(lo[a] as isize);
        let to = (centre[a] + reach).min(hi[a] as isize - 1);
        from..=to
    };
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let d2 = ((i - centre[0]).pow(2) + (j - centre[1]).pow(2) + (k - centre[2]).pow(2)) as f64;
                if d2 > r * r {
                    continue;
                }
                let v = walker.intensity * (-d2 * inv).exp();
                let idx = grid.index(i as usize, j as usize, k as usize);
                let cell = &mut vol.values_mut()[idx];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}
