//! Normalized center-format boxes, IoU and generalized IoU.
//!
//! Every box lives in the unit image frame as `(cx, cy, w, h)`. Degenerate
//! boxes (zero width or height) are legal and have zero area; a zero union
//! yields an IoU of 0 instead of NaN.

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Center-format box `[cx, cy, w, h]` in image-fraction units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxCyWH {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Finite, non-negative extent.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn from_corners(c: Corners) -> Self {
        Self {
            cx: (c.x1 + c.x2) / 2.0,
            cy: (c.y1 + c.y2) / 2.0,
            w: c.x2 - c.x1,
            h: c.y2 - c.y1,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translated(self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Intersection area, union area and smallest-enclosing-box area of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap<T> {
    pub intersection: T,
    pub union: T,
    pub hull: T,
}

impl<T: Float> Overlap<T> {
    pub fn iou(&self) -> T {
        if self.union > T::zero() {
            self.intersection / self.union
        } else {
            T::zero()
        }
    }

    pub fn giou(&self) -> T {
        let iou = self.iou();
        if self.hull > T::zero() {
            iou - (self.hull - self.union) / self.hull
        } else {
            iou
        }
    }
}

fn corners<T: Float>(b: [T; 4]) -> [T; 4] {
    let two = T::one() + T::one();
    [b[0] - b[2] / two, b[1] - b[3] / two, b[0] + b[2] / two, b[1] + b[3] / two]
}

/// Areas for two `[cx, cy, w, h]` boxes, in any float precision.
pub fn overlap<T: Float>(a: [T; 4], b: [T; 4]) -> Overlap<T> {
    let [ax1, ay1, ax2, ay2] = corners(a);
    let [bx1, by1, bx2, by2] = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    let intersection = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - intersection;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Overlap {
        intersection,
        union,
        hull,
    }
}

/// GIoU of `pred` against a fixed `target`, with its gradient with respect to
/// the four center-format coordinates of `pred`.
///
/// At coincident edges the subgradient takes the `pred` side for the hull and
/// the `target` side for the intersection.
pub fn giou_with_grad<T: Float>(pred: [T; 4], target: [T; 4]) -> (T, [T; 4]) {
    let zero = T::zero();
    let two = T::one() + T::one();
    let ov = overlap(pred, target);
    let giou = ov.giou();

    let [px1, py1, px2, py2] = corners(pred);
    let [gx1, gy1, gx2, gy2] = corners(target);
    let (i, u, c) = (ov.intersection, ov.union, ov.hull);

    // Partials of giou with respect to intersection, pred area and hull area.
    let (d_i, d_area, d_hull) = match (u > zero, c > zero) {
        (true, true) => (
            T::one() / u + i / (u * u) - T::one() / c,
            -i / (u * u) + T::one() / c,
            -u / (c * c),
        ),
        (false, true) => (-T::one() / c, T::one() / c, -u / (c * c)),
        (true, false) => (T::one() / u + i / (u * u), -i / (u * u), zero),
        (false, false) => (zero, zero, zero),
    };

    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let ind = |cond: bool| if cond { T::one() } else { zero };

    let x_overlaps = iw_raw > zero;
    let y_overlaps = ih_raw > zero;
    let di_dx2 = ih * ind(x_overlaps && px2 < gx2);
    let di_dx1 = -ih * ind(x_overlaps && px1 > gx1);
    let di_dy2 = iw * ind(y_overlaps && py2 < gy2);
    let di_dy1 = -iw * ind(y_overlaps && py1 > gy1);

    let (pw, ph) = (px2 - px1, py2 - py1);
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let dc_dx2 = ch * ind(px2 >= gx2);
    let dc_dx1 = -ch * ind(px1 <= gx1);
    let dc_dy2 = cw * ind(py2 >= gy2);
    let dc_dy1 = -cw * ind(py1 <= gy1);

    let g_x1 = d_i * di_dx1 - d_area * ph + d_hull * dc_dx1;
    let g_x2 = d_i * di_dx2 + d_area * ph + d_hull * dc_dx2;
    let g_y1 = d_i * di_dy1 - d_area * pw + d_hull * dc_dy1;
    let g_y2 = d_i * di_dy2 + d_area * pw + d_hull * dc_dy2;

    let grad = [
        g_x1 + g_x2,
        g_y1 + g_y2,
        (g_x2 - g_x1) / two,
        (g_y2 - g_y1) / two,
    ];
    (giou, grad)
}

pub fn iou(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    overlap(a.to_array(), b.to_array()).iou()
}

pub fn giou(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    overlap(a.to_array(), b.to_array()).giou()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    #[test]
    fn corner_conversions() {
        let c = BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));
        let c = BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 0.5, 0.5));
        let c = BoxCxCyWH::new(0.5, 0.5, 0.0, 0.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn iou_basic_cases() {
        let a = BoxCxCyWH::new(0.3, 0.4, 0.2, 0.1);
        assert!((iou(&a, &a) - 1.0).abs() < EPS);
        let far = BoxCxCyWH::new(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&a, &far), 0.0);
        let a = BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5);
        let b = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < EPS);
    }

    #[test]
    fn degenerate_boxes_do_not_produce_nan() {
        let p = BoxCxCyWH::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
        let q = BoxCxCyWH::new(0.2, 0.5, 0.0, 0.3);
        assert_eq!(iou(&p, &q), 0.0);
        assert!(giou(&p, &q).is_finite());
    }

    #[test]
    fn giou_cases() {
        let a = BoxCxCyWH::new(0.3, 0.6, 0.2, 0.4);
        assert!((giou(&a, &a) - 1.0).abs() < EPS);
        let a = BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0);
        let b = BoxCxCyWH::new(1.5, 1.5, 1.0, 1.0);
        assert!((giou(&a, &b) + 0.5).abs() < EPS);
        let a = BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5);
        let b = BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5);
        assert!((giou(&a, &b) - (1.0 / 7.0 - 0.125 / 0.5625)).abs() < EPS);
    }

    #[test]
    fn giou_equals_iou_when_nested() {
        let outer = BoxCxCyWH::new(0.5, 0.5, 0.6, 0.6);
        let inner = BoxCxCyWH::new(0.45, 0.55, 0.2, 0.1);
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < EPS);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let pairs = [
            ([0.42, 0.51, 0.31, 0.22], [0.5, 0.47, 0.25, 0.34]),
            ([0.2, 0.3, 0.1, 0.15], [0.7, 0.6, 0.2, 0.25]),
            ([0.5, 0.5, 0.6, 0.5], [0.52, 0.49, 0.2, 0.1]),
        ];
        let h = 1e-6;
        for (p, g) in pairs {
            let (_, grad) = giou_with_grad(p, g);
            for k in 0..4 {
                let mut hi = p;
                let mut lo = p;
                hi[k] += h;
                lo[k] -= h;
                let fd = (overlap(hi, g).giou() - overlap(lo, g).giou()) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7, "coord {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn corners_round_trip() {
        let b = BoxCxCyWH::new(0.137, 0.912, 0.05, 0.3);
        let back = BoxCxCyWH::from_corners(b.to_corners());
        for (x, y) in b.to_array().iter().zip(back.to_array()) {
            assert!((x - y).abs() < EPS);
        }
    }
}
