//! Rotary position embedding on interleaved dimension pairs.
//!
//! Pair j of a head vector (dims 2j, 2j+1) is rotated by angle p * theta_j
//! with theta_j = 10000^(-2j / head_dim). Because rotations compose
//! additively — R(p + d) = R(d) R(p) — keys encoded at one position can be
//! moved to another after the fact, which is what makes precompiled cache
//! entries relocatable. Angles are computed in f64 and the cos/sin factors
//! cast to f32 once, so repositioning stays within float tolerance of a
//! fresh encode.

use ndarray::{Array3, ArrayViewMut1};

/// (cos, sin) factors for each dimension pair at one position. `position`
/// is signed so the same table serves delta rotations in either direction.
pub fn pair_angles(head_dim: usize, position: i64) -> Vec<(f32, f32)> {
    debug_assert!(head_dim % 2 == 0);
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(half);
    for j in 0..half {
        let theta = 10000f64.powf(-2.0 * j as f64 / head_dim as f64);
        let angle = position as f64 * theta;
        out.push((angle.cos() as f32, angle.sin() as f32));
    }
    out
}

fn rotate_pairs(mut v: ArrayViewMut1<'_, f32>, angles: &[(f32, f32)]) {
    for (j, &(cos, sin)) in angles.iter().enumerate() {
        let a = v[2 * j];
        let b = v[2 * j + 1];
        v[2 * j] = a * cos - b * sin;
        v[2 * j + 1] = a * sin + b * cos;
    }
}

/// Rotates each slot of a `[heads, seq, head_dim]` tensor by its absolute
/// position `base_position + s`.
pub fn rotate_tensor(x: &mut Array3<f32>, base_position: usize) {
    let (heads, seq, head_dim) = x.dim();
    for s in 0..seq {
        let angles = pair_angles(head_dim, (base_position + s) as i64);
        for h in 0..heads {
            rotate_pairs(x.slice_mut(ndarray::s![h, s, ..]), &angles);
        }
    }
}

/// Rotates every slot by the same signed position delta; used to move
/// already-encoded keys from one base position to another.
pub fn rotate_tensor_delta(x: &mut Array3<f32>, delta: i64) {
    let (heads, seq, head_dim) = x.dim();
    if delta == 0 {
        return;
    }
    let angles = pair_angles(head_dim, delta);
    for h in 0..heads {
        for s in 0..seq {
            rotate_pairs(x.slice_mut(ndarray::s![h, s, ..]), &angles);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample(heads: usize, seq: usize, dim: usize) -> Array3<f32> {
        Array3::from_shape_fn((heads, seq, dim), |(h, s, d)| {
            ((h * 31 + s * 7 + d) as f32 * 0.13).sin()
        })
    }

    #[test]
    fn zero_position_is_identity() {
        let x = sample(2, 3, 8);
        let mut y = x.clone();
        rotate_tensor(&mut y, 0);
        // position 0 rotates slot 0 by angle 0 only; later slots move
        for d in 0..8 {
            assert_eq!(x[[0, 0, d]], y[[0, 0, d]]);
        }
    }

    #[test]
    fn zero_delta_is_identity() {
        let x = sample(2, 3, 8);
        let mut y = x.clone();
        rotate_tensor_delta(&mut y, 0);
        assert_eq!(x, y);
    }

    #[test]
    fn delta_then_inverse_recovers_input() {
        let x = sample(4, 5, 16);
        let mut y = x.clone();
        rotate_tensor_delta(&mut y, 9);
        rotate_tensor_delta(&mut y, -9);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn base_rotation_composes_with_delta() {
        // encode at base 0 then shift by 7 == encode at base 7
        let x = sample(4, 6, 16);
        let mut shifted = x.clone();
        rotate_tensor(&mut shifted, 0);
        rotate_tensor_delta(&mut shifted, 7);
        let mut direct = x.clone();
        rotate_tensor(&mut direct, 7);
        for (a, b) in shifted.iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn rotation_preserves_pair_norms() {
        let x = sample(2, 4, 8);
        let mut y = x.clone();
        rotate_tensor(&mut y, 21);
        for h in 0..2 {
            for s in 0..4 {
                for j in 0..4 {
                    let n0 = x[[h, s, 2 * j]].hypot(x[[h, s, 2 * j + 1]]);
                    let n1 = y[[h, s, 2 * j]].hypot(y[[h, s, 2 * j + 1]]);
                    assert!((n0 - n1).abs() <= 1e-5);
                }
            }
        }
    }
}
