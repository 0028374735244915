//! Oriented rectangles, separating-axis overlap and ray intersection.

/// A rectangle centred at `(cx, cy)` whose long axis points along `heading`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub heading: f64,
}

impl Rect {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, heading: f64) -> Self {
        Self { cx, cy, half_length: 0.5 * length, half_width: 0.5 * width, heading }
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [(fx, fy), (lx, ly)] = self.axes();
        let (hl, hw) = (self.half_length, self.half_width);
        let mut out = [(0.0, 0.0); 4];
        for (i, (sl, sw)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)].into_iter().enumerate() {
            out[i] = (self.cx + sl * hl * fx + sw * hw * lx, self.cy + sl * hl * fy + sw * hw * ly);
        }
        out
    }

    fn project(&self, axis: (f64, f64)) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, y) in self.corners() {
            let p = x * axis.0 + y * axis.1;
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    /// Lowest and highest lateral coordinate covered by the rectangle.
    pub fn y_extent(&self) -> (f64, f64) {
        self.project((0.0, 1.0))
    }

    /// Axis-aligned bounds `(x_min, x_max, y_min, y_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x0, x1) = self.project((1.0, 0.0));
        let (y0, y1) = self.project((0.0, 1.0));
        (x0, x1, y0, y1)
    }
}

/// Separating-axis test. Touching rectangles count as overlapping.
pub fn rects_overlap(a: &Rect, b: &Rect) -> bool {
    a.axes().into_iter().chain(b.axes()).all(|axis| {
        let (a0, a1) = a.project(axis);
        let (b0, b1) = b.project(axis);
        a1 >= b0 && b1 >= a0
    })
}

/// Distance along the unit ray `origin + t * dir` to an axis-aligned box,
/// `Some(0.0)` when the origin lies inside it.
pub fn ray_aabb(origin: (f64, f64), dir: (f64, f64), bounds: (f64, f64, f64, f64)) -> Option<f64> {
    let (x0, x1, y0, y1) = bounds;
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (o, d, lo, hi) in [(origin.0, dir.0, x0, x1), (origin.1, dir.1, y0, y1)] {
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let ta = (lo - o) / d;
            let tb = (hi - o) / d;
            t_near = t_near.max(ta.min(tb));
            t_far = t_far.min(ta.max(tb));
        }
    }
    if t_near > t_far || t_far < 0.0 {
        None
    } else {
        Some(t_near.max(0.0))
    }
}

/// Distance along the ray to the horizontal line `y = line_y`, if ahead.
pub fn ray_horizontal_line(origin: (f64, f64), dir: (f64, f64), line_y: f64) -> Option<f64> {
    if dir.1 == 0.0 {
        return (origin.1 == line_y).then_some(0.0);
    }
    let t = (line_y - origin.1) / dir.1;
    (t >= 0.0).then_some(t)
}
