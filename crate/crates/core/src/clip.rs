//! Exact area of intersection between an axis-aligned rectangle and an
//! ellipse in standard position, `(x/A)² + (y/B)² = 1`.
//!
//! The rectangle is split along the coordinate axes into at most four parts,
//! each part is reflected into the first quadrant, and the area of each
//! first-quadrant rectangle is found from which of its corners lie inside
//! the ellipse.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle given by its centre, width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedRect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl AlignedRect {
    pub fn new(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self { cx, cy, width, height }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// First-quadrant rectangle: corner nearest the origin at `(x0, y0)`, extents
/// `width` and `height`. All fields are non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRect {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl QuadrantRect {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Which corners of a first-quadrant rectangle decide the intersection formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntersectionCase {
    /// Nearest corner outside: no overlap.
    NoCornerInside,
    /// Only the nearest corner inside.
    NearCornerOnly,
    /// Nearest and lower-right corners inside.
    BottomEdgeInside,
    /// Nearest and upper-left corners inside.
    LeftEdgeInside,
    /// All but the far corner inside.
    FarCornerOutside,
    /// Whole rectangle inside.
    AllInside,
}

/// Reflects the parts of `rect` lying in each quadrant into the first quadrant.
///
/// Parts that do not overlap a quadrant come back with zero width or height.
pub fn split_to_quadrants(rect: &AlignedRect) -> [QuadrantRect; 4] {
    let hw = 0.5 * rect.width;
    let hh = 0.5 * rect.height;
    // quadrants I..IV: signs applied to the centre coordinates
    let signs = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    signs.map(|(sx, sy)| {
        let x = sx * rect.cx;
        let y = sy * rect.cy;
        let x0 = (x - hw).max(0.0);
        let y0 = (y - hh).max(0.0);
        QuadrantRect {
            x0,
            y0,
            width: (x + hw - x0).max(0.0),
            height: (y + hh - y0).max(0.0),
        }
    })
}

/// Area of the part of the quarter ellipse lying above and to the right of
/// `(A·u, B·v)`, in units of `AB/2`, for a point `(u, v)` inside the unit circle.
pub fn corner_area_factor(u: f64, v: f64) -> f64 {
    let su = (1.0 - u * u).max(0.0).sqrt();
    let sv = (1.0 - v * v).max(0.0).sqrt();
    // arcsin(√(1-v²)) - arcsin(u), written without the combined arcsin
    // so that nothing is evaluated next to the ±1 singularity of arcsin.
    let angle = v.clamp(-1.0, 1.0).acos() - u.clamp(-1.0, 1.0).asin();
    angle - u * su - v * sv + 2.0 * u * v
}

/// The same factor in its combined single-arcsin form.
pub fn corner_area_factor_arcsin(u: f64, v: f64) -> f64 {
    let su = (1.0 - u * u).max(0.0).sqrt();
    let sv = (1.0 - v * v).max(0.0).sqrt();
    (su * sv - u * v).clamp(-1.0, 1.0).asin() - u * su - v * sv + 2.0 * u * v
}

fn inside(x: f64, y: f64, a: f64, b: f64) -> bool {
    (x / a).powi(2) + (y / b).powi(2) < 1.0
}

/// Classifies a first-quadrant rectangle. A corner exactly on the ellipse counts as outside.
pub fn classify(q: &QuadrantRect, a: f64, b: f64) -> IntersectionCase {
    let (x1, y1) = (q.x0 + q.width, q.y0 + q.height);
    if !inside(q.x0, q.y0, a, b) {
        return IntersectionCase::NoCornerInside;
    }
    if inside(x1, y1, a, b) {
        return IntersectionCase::AllInside;
    }
    match (inside(q.x0, y1, a, b), inside(x1, q.y0, a, b)) {
        (true, true) => IntersectionCase::FarCornerOutside,
        (false, true) => IntersectionCase::BottomEdgeInside,
        (true, false) => IntersectionCase::LeftEdgeInside,
        (false, false) => IntersectionCase::NearCornerOnly,
    }
}

/// Area of intersection of a first-quadrant rectangle with the ellipse of semi-axes `a`, `b`.
pub fn quadrant_intersection_area(q: &QuadrantRect, a: f64, b: f64) -> f64 {
    if q.width <= 0.0 || q.height <= 0.0 {
        return 0.0;
    }
    let u0 = q.x0 / a;
    let v0 = q.y0 / b;
    let u1 = (q.x0 + q.width) / a;
    let v1 = (q.y0 + q.height) / b;
    let f = corner_area_factor;
    let half_ab = 0.5 * a * b;
    let area = match classify(q, a, b) {
        IntersectionCase::NoCornerInside => 0.0,
        IntersectionCase::NearCornerOnly => half_ab * f(u0, v0),
        IntersectionCase::BottomEdgeInside => half_ab * (f(u0, v0) - f(u1, v0)),
        IntersectionCase::LeftEdgeInside => half_ab * (f(u0, v0) - f(u0, v1)),
        IntersectionCase::FarCornerOutside => half_ab * (f(u0, v0) - f(u1, v0) - f(u0, v1)),
        IntersectionCase::AllInside => return q.area(),
    };
    area.clamp(0.0, q.area())
}

/// Area of intersection between `rect` and the ellipse `(x/a)² + (y/b)² ≤ 1`.
pub fn ellipse_rect_area(rect: &AlignedRect, a: f64, b: f64) -> f64 {
    split_to_quadrants(rect)
        .iter()
        .map(|q| quadrant_intersection_area(q, a, b))
        .sum()
}
