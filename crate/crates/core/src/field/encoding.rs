//! Input encodings: sinusoidal frequency encoding and unbounded-scene
//! contraction.

use crate::geometry::Vec3;

/// Writes `[sin(x), cos(x), sin(2x), cos(2x), …, sin(2^{L-1}x), cos(2^{L-1}x)]`
/// into `out`, where each entry is a 3-vector, so `out.len() == 6 * levels`.
///
/// Higher octaves come from the double-angle identities, which keeps the
/// cost at one `sin_cos` per coordinate.
pub fn positional_encode_into(x: &[f64; 3], levels: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 6 * levels);
    for c in 0..3 {
        let (mut s, mut co) = x[c].sin_cos();
        for l in 0..levels {
            out[6 * l + c] = s;
            out[6 * l + 3 + c] = co;
            let (s2, c2) = (2.0 * s * co, (co - s) * (co + s));
            s = s2;
            co = c2;
        }
    }
}

pub fn positional_encode(x: &[f64; 3], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; 6 * levels];
    positional_encode_into(x, levels, &mut out);
    out
}

/// Maps all of space into the ball of radius 2: identity inside the unit
/// ball, `(2 - 1/‖x‖) x/‖x‖` outside.
pub fn contract(x: &Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Inverse of [`contract`] for points with norm below 2.
pub fn uncontract(y: &Vec3) -> Vec3 {
    let m = y.norm();
    if m <= 1.0 {
        *y
    } else {
        // m = 2 - 1/n  =>  n = 1 / (2 - m)
        let n = 1.0 / (2.0 - m);
        y * (n / m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_input_encoding() {
        let e = positional_encode(&[0.0; 3], 2);
        assert_eq!(e.len(), 12);
        for l in 0..2 {
            assert!(e[6 * l..6 * l + 3].iter().all(|&v| v == 0.0));
            assert!(e[6 * l + 3..6 * l + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn quarter_turn() {
        let e = positional_encode(&[FRAC_PI_2, 0.0, 0.0], 1);
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[3].abs() < 1e-15);
    }

    #[test]
    fn contraction_values() {
        let inside = Vec3::new(0.3, 0.0, 0.4);
        assert_eq!(contract(&inside), inside);
        assert!((contract(&Vec3::new(2.0, 0.0, 0.0)) - Vec3::new(1.5, 0.0, 0.0)).norm() < 1e-15);
        let far = contract(&Vec3::new(1e12, 0.0, 0.0)).norm();
        assert!(far < 2.0 && far > 2.0 - 1e-9);
    }

    proptest! {
        #[test]
        fn encoding_matches_direct_trig(x in prop::array::uniform3(-10.0f64..10.0)) {
            let e = positional_encode(&x, 4);
            for l in 0..4 {
                let f = (1u32 << l) as f64;
                for c in 0..3 {
                    prop_assert!((e[6 * l + c] - (f * x[c]).sin()).abs() < 1e-12);
                    prop_assert!((e[6 * l + 3 + c] - (f * x[c]).cos()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn contraction_inverts(x in prop::array::uniform3(-100.0f64..100.0)) {
            let x = Vec3::from(x);
            let y = contract(&x);
            prop_assert!(y.norm() < 2.0);
            prop_assert!((uncontract(&y) - x).norm() <= 1e-9 * x.norm().max(1.0));
        }
    }
}
