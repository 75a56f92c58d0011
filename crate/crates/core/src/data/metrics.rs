use super::{DataError, Result};
use crate::wave::Volume;

fn check(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DataError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared difference over all voxels.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check(a, b)?;
    let n = a.values().len() as f64;
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `20 log10(peak) - 10 log10(mse)` in dB; `f64::INFINITY` when the volumes
/// are identical.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * peak.log10() - 10.0 * m.log10())
}
