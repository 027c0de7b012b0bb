//! Rotary position embeddings, paired-halves layout: element `i` is rotated
//! together with element `i + head_dim / 2`.

use crate::error::{Error, Result};

/// Rotation angle of pair `i` at `position`.
fn angle(position: usize, pair: usize, head_dim: usize, theta: f32) -> f64 {
    let exponent = (2 * pair) as f64 / head_dim as f64;
    position as f64 / (theta as f64).powf(exponent)
}

/// Rotate one head vector in place.
pub fn rotate_in_place(vec: &mut [f32], position: usize, theta: f32) -> Result<()> {
    let hd = vec.len();
    if hd % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head_dim, got {hd}"
        )));
    }
    let half = hd / 2;
    for i in 0..half {
        let (sin, cos) = angle(position, i, hd, theta).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let x = vec[i];
        let y = vec[i + half];
        vec[i] = x * cos - y * sin;
        vec[i + half] = x * sin + y * cos;
    }
    Ok(())
}

pub fn rope_rotate(vec: &[f32], position: usize, theta: f32) -> Result<Vec<f32>> {
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, position, theta)?;
    Ok(out)
}

/// Rotate every `head_dim`-sized chunk of each row; row `r` uses `positions[r]`.
pub(crate) fn rotate_rows(
    data: &mut [f32],
    row_width: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f32,
) -> Result<()> {
    for (row, &pos) in data.chunks_exact_mut(row_width).zip(positions) {
        for head in row.chunks_exact_mut(head_dim) {
            rotate_in_place(head, pos, theta)?;
        }
    }
    Ok(())
}
