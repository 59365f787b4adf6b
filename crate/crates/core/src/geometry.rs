//! Planar geometry on projected (metric) coordinates.
//!
//! Rings are stored closed (first vertex repeated at the end) and
//! counter-clockwise after [`normalize_ring`].

use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Rotate counter-clockwise about `center` by `angle_deg`.
    pub fn rotated(self, center: Point, angle_deg: f64) -> Point {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let dx = self.x - center.x;
        let dy = self.y - center.y;
        Point::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bbox {
    pub fn of(points: &[Point]) -> Bbox {
        let mut b = Bbox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in points {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        b
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn contains_bbox(&self, other: &Bbox) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Deduplicate, close and orient a ring counter-clockwise. Returns `None`
/// for rings with fewer than three distinct vertices or zero area.
pub fn normalize_ring(points: &[Point]) -> Option<Vec<Point>> {
    let mut ring: Vec<Point> = Vec::with_capacity(points.len() + 1);
    for &p in points {
        if !p.x.is_finite() || !p.y.is_finite() {
            return None;
        }
        if ring.last() != Some(&p) {
            ring.push(p);
        }
    }
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return None;
    }
    let area = signed_area(&ring);
    let scale = Bbox::of(&ring);
    let extent = scale.width().max(scale.height());
    if area.abs() <= EPS * extent * extent || area.abs() == 0.0 {
        return None;
    }
    if area < 0.0 {
        ring.reverse();
    }
    ring.push(ring[0]);
    Some(ring)
}

/// Open ring view: closed ring without the repeated last vertex.
pub fn open_ring(ring: &[Point]) -> &[Point] {
    if ring.len() > 1 && ring.first() == ring.last() {
        &ring[..ring.len() - 1]
    } else {
        ring
    }
}

/// Area-weighted centroid of a simple polygon.
pub fn centroid(ring: &[Point]) -> Point {
    let pts = open_ring(ring);
    let n = pts.len();
    // shift to the first vertex for numerical stability with large UTM values
    let o = pts[0];
    let mut a = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = Point::new(pts[i].x - o.x, pts[i].y - o.y);
        let q = Point::new(pts[(i + 1) % n].x - o.x, pts[(i + 1) % n].y - o.y);
        let cross = p.x * q.y - q.x * p.y;
        a += cross;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    if a.abs() < f64::MIN_POSITIVE {
        let sx: f64 = pts.iter().map(|p| p.x).sum();
        let sy: f64 = pts.iter().map(|p| p.y).sum();
        return Point::new(sx / n as f64, sy / n as f64);
    }
    Point::new(o.x + cx / (3.0 * a), o.y + cy / (3.0 * a))
}

fn edges(ring: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let pts = open_ring(ring);
    let n = pts.len();
    (0..n).map(move |i| (pts[i], pts[(i + 1) % n]))
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(a.lerp(b, t))
}

/// Point location with a boundary tolerance of `tol` meters.
pub fn locate_point(p: Point, ring: &[Point], tol: f64) -> Location {
    let mut inside = false;
    for (a, b) in edges(ring) {
        if point_segment_distance(p, a, b) <= tol {
            return Location::Boundary;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

/// Even-odd containment without boundary tolerance; used for pixel-center
/// rasterization where the boundary set has measure zero.
pub fn contains_point(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for (a, b) in edges(ring) {
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Parameters `t` along `a→b` where the segment meets the edge `c→d`
/// (including collinear overlap endpoints).
fn segment_hits(a: Point, b: Point, c: Point, d: Point, out: &mut Vec<f64>) {
    let r = Point::new(b.x - a.x, b.y - a.y);
    let s = Point::new(d.x - c.x, d.y - c.y);
    let qp = Point::new(c.x - a.x, c.y - a.y);
    let denom = cross(r, s);
    let rr = r.x * r.x + r.y * r.y;
    if rr == 0.0 {
        return;
    }
    let scale = rr.sqrt() * (s.x * s.x + s.y * s.y).sqrt();
    if denom.abs() <= EPS * scale {
        if cross(qp, r).abs() <= EPS * rr.sqrt() * (qp.x.hypot(qp.y) + 1.0) {
            // collinear
            for p in [c, d] {
                let t = ((p.x - a.x) * r.x + (p.y - a.y) * r.y) / rr;
                if (0.0..=1.0).contains(&t) {
                    out.push(t);
                }
            }
        }
        return;
    }
    let t = cross(qp, s) / denom;
    let u = cross(qp, r) / denom;
    let tol = 1e-12;
    if (-tol..=1.0 + tol).contains(&t) && (-tol..=1.0 + tol).contains(&u) {
        out.push(t.clamp(0.0, 1.0));
    }
}

/// Smallest parameter `t ∈ [0, 1)` at which the segment `a→b` enters the
/// open interior of `ring`, or `None` if it only touches the boundary or
/// misses the polygon.
pub fn segment_interior_entry(a: Point, b: Point, ring: &[Point]) -> Option<f64> {
    let mut ts = vec![0.0, 1.0];
    for (c, d) in edges(ring) {
        segment_hits(a, b, c, d, &mut ts);
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    let len = a.distance(b);
    let tol = 1e-9 * (1.0 + len);
    for w in ts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 1e-12 {
            continue;
        }
        let mid = a.lerp(b, 0.5 * (t0 + t1));
        if locate_point(mid, ring, tol) == Location::Inside {
            return Some(t0);
        }
    }
    None
}

/// Minimum distance between two polygon boundaries (0 when they touch or
/// one contains a vertex of the other).
pub fn ring_distance(a: &[Point], b: &[Point]) -> f64 {
    if open_ring(a).iter().any(|&p| contains_point(b, p))
        || open_ring(b).iter().any(|&p| contains_point(a, p))
    {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (p, q) in edges(a) {
        for (r, s) in edges(b) {
            let mut hits = Vec::new();
            segment_hits(p, q, r, s, &mut hits);
            if !hits.is_empty() {
                return 0.0;
            }
            best = best
                .min(point_segment_distance(p, r, s))
                .min(point_segment_distance(q, r, s))
                .min(point_segment_distance(r, p, q))
                .min(point_segment_distance(s, p, q));
        }
    }
    best
}

/// Map any angle in degrees to `[0, 360)`.
pub fn normalize_deg(angle: f64) -> f64 {
    let r = angle.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Compass bearing (clockwise from north = +y) from `from` to `to`, in `[0, 360)`.
pub fn bearing_deg(from: Point, to: Point) -> f64 {
    normalize_deg((to.x - from.x).atan2(to.y - from.y).to_degrees())
}
