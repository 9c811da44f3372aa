//! Flow visualization with the standard color wheel: hue encodes direction,
//! saturation encodes magnitude, zero flow is white.

use crate::flo::FlowField;
use crate::image::Image;

/// Renders a flow field as an RGB image.
///
/// Hue is `atan2(v, u)`, saturation is the magnitude divided by
/// `max_magnitude` (clamped to 1), value is 1. When `max_magnitude` is not
/// given it defaults to the 99th-percentile magnitude of the field, so a few
/// outliers do not wash out the rest.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f32>) -> Image {
    let mags = flow.magnitudes();
    let norm = match max_magnitude {
        Some(m) if m > 0.0 => m,
        Some(_) => 1.0,
        None => {
            let p99 = percentile(&mags, 0.99);
            if p99 > 0.0 {
                p99
            } else {
                1.0
            }
        }
    };
    let n = flow.width * flow.height;
    let mut data = vec![0.0f32; 3 * n];
    for p in 0..n {
        let (u, v) = (flow.u[p], flow.v[p]);
        let sat = (mags[p] / norm).min(1.0);
        let hue_deg = v.atan2(u).to_degrees().rem_euclid(360.0);
        let (r, g, b) = hsv_to_rgb(hue_deg, sat, 1.0);
        data[3 * p] = r;
        data[3 * p + 1] = g;
        data[3 * p + 2] = b;
    }
    Image::new(flow.width, flow.height, 3, data).expect("consistent dims")
}

/// Nearest-rank percentile; `q` in [0, 1].
fn percentile(values: &[f32], q: f32) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let idx = ((sorted.len() - 1) as f32 * q).round() as usize;
    sorted[idx]
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h_deg / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_renders_white() {
        let img = flow_to_color(&FlowField::zeros(3, 2), None);
        for v in &img.data {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn rightward_flow_at_normalization_is_saturated_red() {
        let flow = FlowField::constant(1, 1, 2.5, 0.0);
        let img = flow_to_color(&flow, Some(2.5));
        // hue 0 at full saturation: pure red
        assert!((img.data[0] - 1.0).abs() < 1e-6);
        assert!(img.data[1].abs() < 1e-6);
        assert!(img.data[2].abs() < 1e-6);
    }

    #[test]
    fn negating_flow_moves_hue_180_degrees() {
        for (u, v) in [(1.0f32, 0.0f32), (0.3, 0.8), (-0.5, 0.2)] {
            let a = flow_to_color(&FlowField::constant(1, 1, u, v), Some(1.0));
            let b = flow_to_color(&FlowField::constant(1, 1, -u, -v), Some(1.0));
            let hue = |img: &Image| -> f32 {
                let (r, g, bl) = (img.data[0], img.data[1], img.data[2]);
                let max = r.max(g).max(bl);
                let min = r.min(g).min(bl);
                let d = max - min;
                let h = if d == 0.0 {
                    0.0
                } else if max == r {
                    60.0 * ((g - bl) / d).rem_euclid(6.0)
                } else if max == g {
                    60.0 * ((bl - r) / d + 2.0)
                } else {
                    60.0 * ((r - g) / d + 4.0)
                };
                h.rem_euclid(360.0)
            };
            let diff = (hue(&a) - hue(&b)).rem_euclid(360.0);
            assert!(
                (diff - 180.0).abs() < 1e-3,
                "hue separation {diff} for ({u}, {v})"
            );
        }
    }

    #[test]
    fn uniform_scaling_with_matching_normalization_is_invariant() {
        let flow = FlowField::constant(2, 2, 0.4, -0.7);
        let a = flow_to_color(&flow, Some(2.0));
        let scaled = FlowField::constant(2, 2, 0.4 * 5.0, -0.7 * 5.0);
        let b = flow_to_color(&scaled, Some(10.0));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
