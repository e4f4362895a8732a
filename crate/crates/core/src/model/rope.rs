//! Session-wise rotary position encoding: the standard rotary rotation with
//! the session index as the position, so all tokens of one session share the
//! same angle set and attention sees only relative session offsets.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// θ_j = base^(-2j / head_dim) for pair j.
pub fn rope_angle(pair: usize, head_dim: usize) -> f64 {
    ROPE_BASE.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotate one head-dim vector by its session index. Identity when disabled.
pub fn sw_rope_rotate(vec: &[f64], session_index: usize, enabled: bool) -> Result<Vec<f64>> {
    if vec.len() % 2 != 0 {
        return Err(Error::config(format!(
            "head dim {} must be even for rotary pairs",
            vec.len()
        )));
    }
    if !enabled {
        return Ok(vec.to_vec());
    }
    let mut out = vec.to_vec();
    for j in 0..vec.len() / 2 {
        let theta = rope_angle(j, vec.len()) * session_index as f64;
        let (sin, cos) = theta.sin_cos();
        let x = vec[2 * j];
        let y = vec[2 * j + 1];
        out[2 * j] = x * cos - y * sin;
        out[2 * j + 1] = x * sin + y * cos;
    }
    Ok(out)
}
