//! Color encoding of optical-flow fields.
//!
//! Classic 55-entry color wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
//! The wheel position comes from atan2(v, u); saturation scales with the
//! magnitude normalized by the per-image maximum, fading to white at zero
//! motion.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

const SEGMENTS: [(usize, [f32; 3], [f32; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), // red -> yellow
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),  // yellow -> green
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),  // green -> cyan
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]), // cyan -> blue
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]), // blue -> magenta
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),  // magenta -> red
];

/// Number of distinct wheel entries.
pub const WHEEL_COLS: usize = 55;

/// Builds the wheel table.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_COLS);
    for (count, from, to) in SEGMENTS {
        for i in 0..count {
            let t = i as f32 / count as f32;
            wheel.push([
                from[0] + (to[0] - from[0]) * t,
                from[1] + (to[1] - from[1]) * t,
                from[2] + (to[2] - from[2]) * t,
            ]);
        }
    }
    wheel
}

/// Fully saturated wheel color for a flow direction angle in radians.
pub fn wheel_color(angle: f32) -> [f32; 3] {
    let wheel = color_wheel();
    let fk = (angle / std::f32::consts::PI + 1.0) / 2.0 * (WHEEL_COLS - 1) as f32;
    let k0 = (fk.floor() as usize).min(WHEEL_COLS - 1);
    let k1 = (k0 + 1) % WHEEL_COLS;
    let f = fk - k0 as f32;
    [
        wheel[k0][0] + (wheel[k1][0] - wheel[k0][0]) * f,
        wheel[k0][1] + (wheel[k1][1] - wheel[k0][1]) * f,
        wheel[k0][2] + (wheel[k1][2] - wheel[k0][2]) * f,
    ]
}

/// Renders a flow field to a 3-channel image in [0,1]. Magnitude is
/// normalized by the per-image maximum (1 if the field is zero), so scaling
/// the field leaves the image unchanged.
pub fn flow_to_rgb(u: &Array2<f32>, v: &Array2<f32>) -> Result<Array3<f32>> {
    if u.dim() != v.dim() {
        return Err(Error::ShapeMismatch {
            context: "flow_to_rgb".into(),
            expected: format!("{:?}", u.dim()),
            actual: format!("{:?}", v.dim()),
        });
    }
    let (h, w) = u.dim();
    let mut max_mag = 0f32;
    for (a, b) in u.iter().zip(v.iter()) {
        max_mag = max_mag.max((a * a + b * b).sqrt());
    }
    let norm = if max_mag > 0.0 { max_mag } else { 1.0 };
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = (u[(y, x)], v[(y, x)]);
            let rad = (fu * fu + fv * fv).sqrt() / norm;
            let color = wheel_color(fv.atan2(fu));
            for c in 0..3 {
                // Fade toward white as the magnitude drops.
                out[(c, y, x)] = 1.0 - rad * (1.0 - color[c]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_achromatic() {
        let u = Array2::zeros((4, 4));
        let v = Array2::zeros((4, 4));
        let img = flow_to_rgb(&u, &v).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (r, g, b) = (img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
                assert_eq!(r, g);
                assert_eq!(g, b);
                assert_eq!(r, 1.0);
            }
        }
    }

    #[test]
    fn scaling_the_field_leaves_the_image_unchanged() {
        let u = Array2::from_shape_fn((6, 6), |(y, x)| (x as f32 - 2.5) * 0.3 + y as f32 * 0.1);
        let v = Array2::from_shape_fn((6, 6), |(y, x)| (y as f32 - 2.5) * 0.2 - x as f32 * 0.05);
        let a = flow_to_rgb(&u, &v).unwrap();
        let b = flow_to_rgb(&(&u * 2.0), &(&v * 2.0)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn opposite_directions_sit_half_a_wheel_apart() {
        // Evaluate the wheel directly at the two angles the fields hit.
        let right = Array2::from_elem((2, 2), 1.0f32);
        let left = Array2::from_elem((2, 2), -1.0f32);
        let zero = Array2::zeros((2, 2));
        let img_r = flow_to_rgb(&right, &zero).unwrap();
        let img_l = flow_to_rgb(&left, &zero).unwrap();

        let expect_r = wheel_color(0.0);
        let expect_l = wheel_color(std::f32::consts::PI);
        for c in 0..3 {
            assert!((img_r[(c, 0, 0)] - expect_r[c]).abs() < 1e-6);
            assert!((img_l[(c, 0, 0)] - expect_l[c]).abs() < 1e-6);
        }

        // Wheel positions for angles 0 and pi differ by exactly half the
        // wheel: (0/pi+1)/2 = 0.5 vs (pi/pi+1)/2 = 1.0 of (cols-1).
        let pos0 = 0.5 * (WHEEL_COLS - 1) as f32;
        let pos_pi = 1.0 * (WHEEL_COLS - 1) as f32;
        assert_eq!(pos_pi - pos0, (WHEEL_COLS - 1) as f32 / 2.0);
        // And the colors genuinely differ.
        assert_ne!(expect_r, expect_l);
    }
}
