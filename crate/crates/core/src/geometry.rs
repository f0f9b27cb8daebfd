//! Planar primitives shared by the cartography and trail analysis code.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn square(size: f64) -> Self {
        Self::new(0.0, 0.0, size, size)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Point {
        [
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        ]
    }

    pub fn is_valid(&self) -> bool {
        [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite())
            && self.max_x > self.min_x
            && self.max_y > self.min_y
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min_x && p[0] <= self.max_x && p[1] >= self.min_y && p[1] <= self.max_y
    }

    pub fn contains_strict(&self, p: Point) -> bool {
        p[0] > self.min_x && p[0] < self.max_x && p[1] > self.min_y && p[1] < self.max_y
    }

    pub fn inset(&self, by: f64) -> Rect {
        Rect::new(
            self.min_x + by,
            self.min_y + by,
            self.max_x - by,
            self.max_y - by,
        )
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    pub fn expand(&self, by: f64) -> Rect {
        self.inset(-by)
    }

    /// Bounding box of a non-empty point set.
    pub fn bounding(points: impl IntoIterator<Item = Point>) -> Option<Rect> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut r = Rect::new(first[0], first[1], first[0], first[1]);
        for p in it {
            r.min_x = r.min_x.min(p[0]);
            r.min_y = r.min_y.min(p[1]);
            r.max_x = r.max_x.max(p[0]);
            r.max_y = r.max_y.max(p[1]);
        }
        Some(r)
    }

    pub fn to_polygon(&self) -> Vec<Point> {
        vec![
            [self.min_x, self.min_y],
            [self.max_x, self.min_y],
            [self.max_x, self.max_y],
            [self.min_x, self.max_y],
        ]
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn distance_sq(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Shoelace area, positive for counter-clockwise rings.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / 2.0
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn polygon_centroid(poly: &[Point]) -> Point {
    let a = signed_area(poly);
    if a.abs() < 1e-300 {
        let n = poly.len().max(1) as f64;
        let sx: f64 = poly.iter().map(|p| p[0]).sum();
        let sy: f64 = poly.iter().map(|p| p[1]).sum();
        return [sx / n, sy / n];
    }
    let n = poly.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let cross = p[0] * q[1] - q[0] * p[1];
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Minimum signed distance from `p` to the supporting lines of a
/// counter-clockwise convex polygon's edges. Positive means inside.
pub fn convex_interior_margin(poly: &[Point], p: Point) -> f64 {
    let n = poly.len();
    if n < 3 {
        return f64::NEG_INFINITY;
    }
    let mut m = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let len = ex.hypot(ey);
        if len == 0.0 {
            continue;
        }
        let d = (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / len;
        m = m.min(d);
    }
    m
}

/// Even-odd point-in-polygon test for simple polygons; boundary points may
/// land on either side.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Keeps the part of a convex polygon where `n . x <= c`.
pub fn clip_half_plane(poly: &[Point], normal: Point, c: f64) -> Vec<Point> {
    let eval = |p: Point| normal[0] * p[0] + normal[1] * p[1] - c;
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let (fc, fn_) = (eval(cur), eval(next));
        if fc <= 0.0 {
            out.push(cur);
        }
        if (fc < 0.0 && fn_ > 0.0) || (fc > 0.0 && fn_ < 0.0) {
            let t = fc / (fc - fn_);
            out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
        }
    }
    dedup_ring(out)
}

fn dedup_ring(mut ring: Vec<Point>) -> Vec<Point> {
    ring.dedup_by(|a, b| distance_sq(*a, *b) < 1e-24);
    while ring.len() > 1 && distance_sq(ring[0], *ring.last().unwrap()) < 1e-24 {
        ring.pop();
    }
    ring
}

/// Vertical extent `[lo, hi]` of a convex polygon at abscissa `x`.
pub fn convex_vertical_section(poly: &[Point], x: f64) -> Option<(f64, f64)> {
    let n = poly.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let (x0, x1) = (a[0].min(b[0]), a[0].max(b[0]));
        if x < x0 || x > x1 {
            continue;
        }
        if (b[0] - a[0]).abs() < 1e-15 {
            lo = lo.min(a[1].min(b[1]));
            hi = hi.max(a[1].max(b[1]));
        } else {
            let t = (x - a[0]) / (b[0] - a[0]);
            let y = a[1] + t * (b[1] - a[1]);
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_area_and_margin() {
        let sq = Rect::square(2.0).to_polygon();
        assert_eq!(area(&sq), 4.0);
        assert!((convex_interior_margin(&sq, [1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!(convex_interior_margin(&sq, [3.0, 1.0]) < 0.0);
        assert!(point_in_polygon(&sq, [0.5, 1.5]));
        assert!(!point_in_polygon(&sq, [2.5, 1.5]));
    }

    #[test]
    fn clip_square_in_half() {
        let sq = Rect::square(2.0).to_polygon();
        let half = clip_half_plane(&sq, [1.0, 0.0], 1.0);
        assert!((area(&half) - 2.0).abs() < 1e-12);
        assert!(signed_area(&half) > 0.0);
    }

    #[test]
    fn triangle_section() {
        let tri = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let (lo, hi) = convex_vertical_section(&tri, 1.0).unwrap();
        assert!((lo - 0.0).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
        assert!(convex_vertical_section(&tri, 5.0).is_none());
    }
}
