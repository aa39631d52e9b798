use super::{FlowField, OcclusionMask};
use crate::error::Result;

/// Thresholds of the forward-backward check: a pixel is inconsistent when
/// `|F(p) + G(p + F(p))|² > a·(|F(p)|² + |G(p + F(p))|²) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    pub a: f64,
    pub b: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self { a: 0.01, b: 0.5 }
    }
}

/// Occlusion mask on `along`'s grid, using `other` looked up bilinearly at
/// the displaced position. Lookups leaving the image are occluded.
fn one_way(along: &FlowField, other: &FlowField, p: &ConsistencyParams) -> OcclusionMask {
    let (w, h) = (along.width(), along.height());
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = along.get(x, y);
            let qx = x as f32 + u;
            let qy = y as f32 + v;
            if qx < 0.0 || qy < 0.0 || qx > (w - 1) as f32 || qy > (h - 1) as f32 {
                bits.push(true);
                continue;
            }
            let (ou, ov) = other.sample(qx, qy);
            let (u, v, ou, ov) = (u as f64, v as f64, ou as f64, ov as f64);
            let lhs = (u + ou).powi(2) + (v + ov).powi(2);
            let rhs = p.a * (u * u + v * v + ou * ou + ov * ov) + p.b;
            bits.push(lhs > rhs);
        }
    }
    OcclusionMask::new(w, h, bits).expect("mask sized from flow")
}

/// Forward (`O^fwd_{1→i}`, on frame 1's grid) and backward (`O^bwd_{i→1}`,
/// on frame i's grid) occlusion masks.
pub fn fb_occlusion(
    fwd: &FlowField,
    bwd: &FlowField,
    params: &ConsistencyParams,
) -> Result<(OcclusionMask, OcclusionMask)> {
    fwd.same_dims(bwd)?;
    Ok((one_way(fwd, bwd, params), one_way(bwd, fwd, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_translation_has_no_occlusion() {
        let fwd = FlowField::constant(16, 16, 0.0, 0.0).unwrap();
        let bwd = fwd.negated();
        let (fo, bo) = fb_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        assert_eq!(fo.count() + bo.count(), 0);
    }

    #[test]
    fn out_of_bounds_band() {
        let bwd = FlowField::constant(16, 16, 2.0, 0.0).unwrap();
        let fwd = bwd.negated();
        let (_, bo) = fb_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(bo.get(x, y), x >= 14, "({x},{y})");
            }
        }
    }

    #[test]
    fn inconsistent_everywhere() {
        let fwd = FlowField::zeros(16, 16);
        let bwd = FlowField::constant(16, 16, 3.0, 0.0).unwrap();
        let (fo, bo) = fb_occlusion(&fwd, &bwd, &ConsistencyParams::default()).unwrap();
        assert_eq!(bo.count(), 256);
        assert_eq!(fo.count(), 256);
    }

    #[test]
    fn mismatched_dims() {
        let a = FlowField::zeros(16, 16);
        let b = FlowField::zeros(24, 16);
        assert!(fb_occlusion(&a, &b, &ConsistencyParams::default()).is_err());
    }
}
