use crate::{Error, Result};

/// Position of an action inside its chunk as `(sin 2πk/H, cos 2πk/H)`.
pub fn sin_embed(k: usize, horizon: usize) -> Result<[f32; 2]> {
    if horizon == 0 || k >= horizon {
        return Err(Error::InvalidArgument(format!(
            "chunk index {k} outside [0, {horizon})"
        )));
    }
    let angle = std::f64::consts::TAU * k as f64 / horizon as f64;
    Ok([angle.sin() as f32, angle.cos() as f32])
}
