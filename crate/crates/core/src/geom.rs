//! Rotated boxes on the bird's-eye-view grid.
//!
//! Grid coordinates: `x` runs along columns, `y` along rows, both in cell
//! units with the origin at the top-left corner of cell (0, 0). Angles are in
//! degrees, measured from the `+x` axis towards `+y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vehicle footprint: center, size and heading.
///
/// `length ≥ width` and `angle ∈ [0, 180)`; `forward` disambiguates the two
/// headings that share the same rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub angle: f64,
    pub forward: bool,
}

/// Wraps any angle in degrees into `[0, 180)`.
pub fn wrap_angle(deg: f64) -> f64 {
    let w = deg.rem_euclid(180.0);
    if w >= 180.0 {
        0.0
    } else {
        w
    }
}

/// Signed difference `to − from` folded into `[−90, 90)`.
pub fn angle_delta(from: f64, to: f64) -> f64 {
    let d = (to - from + 90.0).rem_euclid(180.0) - 90.0;
    if d >= 90.0 {
        d - 180.0
    } else {
        d
    }
}

impl RotatedBox {
    /// Builds a box, swapping length/width (and turning by 90°) so that
    /// `length ≥ width`, and wrapping the angle into `[0, 180)`.
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, angle: f64, forward: bool) -> Self {
        let (length, width, angle) = if width > length {
            (width, length, angle + 90.0)
        } else {
            (length, width, angle)
        };
        RotatedBox {
            cx,
            cy,
            length,
            width,
            angle: wrap_angle(angle),
            forward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.length, self.width, self.angle]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.length < self.width || !(0.0..180.0).contains(&self.angle) {
            return Err(Error::Invariant(format!("malformed box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.length.max(0.0) * self.width.max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.length > 0.0 && self.width > 0.0)
    }

    /// Unit vectors along the length and width axes.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.angle.to_radians().sin_cos();
        ([c, s], [-s, c])
    }

    /// Corners in counter-clockwise order (for a y-up frame; the ordering is
    /// consistent, which is all the clipping code needs).
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (u, v) = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let at = |a: f64, b: f64| [self.cx + a * u[0] + b * v[0], self.cy + a * u[1] + b * v[1]];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Whether point `(x, y)` lies inside the rectangle (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let a = dx * u[0] + dy * u[1];
        let b = dx * v[0] + dy * v[1];
        a.abs() <= self.length / 2.0 && b.abs() <= self.width / 2.0
    }

    /// Axis-aligned bounding rectangle `(x_min, y_min, x_max, y_max)`.
    pub fn hull(&self) -> (f64, f64, f64, f64) {
        let cs = self.corners();
        let xs = cs.iter().map(|c| c[0]);
        let ys = cs.iter().map(|c| c[1]);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Heading angle in `[0, 360)` combining `angle` and `forward`.
    pub fn heading(&self) -> f64 {
        if self.forward {
            self.angle
        } else {
            self.angle + 180.0
        }
    }

    /// Distance from the box center to a point.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.cx - x).hypot(self.cy - y)
    }
}
