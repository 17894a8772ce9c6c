//! Rotated-box geometry on the BEV plane and in 3D.
//!
//! Boxes are rectangles with a heading: `l` is the extent along the heading
//! direction, `w` across it, `theta` counter-clockwise from +x. BEV
//! intersection goes through Sutherland-Hodgman clipping of the two corner
//! polygons; 3D IoU multiplies the BEV intersection by the vertical overlap.
//!
//! The orientation-decoupled (OD) IoU family evaluates IoU/GIoU/DIoU with
//! the predicted heading *replaced* by the ground-truth heading, so both
//! boxes are axis-aligned in the ground-truth frame. This is an
//! interpretation: decoupling could also mean "rotated IoU with the theta
//! gradient stopped", which differs in value (not in the theta gradient)
//! whenever the headings disagree. The substitution form is used here
//! because it both removes theta from the gradient path and reduces the
//! evaluation to an axis-aligned IoU with cheap analytic derivatives.
//!
//! [`rasterize_iou`] is an independent grid-counting oracle: it never
//! touches the corner/clipping path, so the two routes check each other.

use serde::{Deserialize, Serialize};

/// Intersection areas below this are reported as zero square meters.
pub const AREA_EPS: f64 = 1e-12;

/// Consecutive clip vertices closer than this are merged (meters).
const VERTEX_EPS: f64 = 1e-9;

/// A rotated rectangle on the BEV plane.
///
/// `l` runs along the heading, `w` across it. `theta` is stored
/// unnormalized; the unoriented-rectangle operations (areas, IoU) are
/// invariant under `theta -> theta + pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBev {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub theta: f64,
}

impl BoxBev {
    pub fn new(cx: f64, cy: f64, l: f64, w: f64, theta: f64) -> Result<Self, GeomError> {
        let b = Self { cx, cy, l, w, theta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        for v in [self.cx, self.cy, self.l, self.w, self.theta] {
            if !v.is_finite() {
                return Err(GeomError::NonFinite);
            }
        }
        if self.l <= 0.0 || self.w <= 0.0 {
            return Err(GeomError::NonPositiveExtent);
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.l * self.w
    }

    /// True if `(x, y)` lies inside the rectangle (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= self.l / 2.0 && across.abs() <= self.w / 2.0
    }
}

/// A 7-parameter 3D box: BEV footprint plus center height and vertical extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        l: f64,
        w: f64,
        h: f64,
        theta: f64,
    ) -> Result<Self, GeomError> {
        let b = Self { cx, cy, cz, l, w, h, theta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        self.bev().validate()?;
        if !self.cz.is_finite() || !self.h.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if self.h <= 0.0 {
            return Err(GeomError::NonPositiveExtent);
        }
        Ok(())
    }

    /// BEV footprint.
    pub fn bev(&self) -> BoxBev {
        BoxBev { cx: self.cx, cy: self.cy, l: self.l, w: self.w, theta: self.theta }
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// True if the 3D point lies inside the box (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (z - self.cz).abs() <= self.h / 2.0 && self.bev().contains(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomError {
    NonPositiveExtent,
    NonFinite,
}

impl std::fmt::Display for GeomError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeomError::NonPositiveExtent => write!(f, "box extents must be positive"),
            GeomError::NonFinite => write!(f, "box parameters must be finite"),
        }
    }
}

impl std::error::Error for GeomError {}

/// Counter-clockwise convex polygon; the carrier type for box intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Signed shoelace area; non-negative for CCW vertex order.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            acc += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        (acc / 2.0).max(0.0)
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vertices.len().max(1) as f64;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for v in &self.vertices {
            cx += v[0];
            cy += v[1];
        }
        [cx / n, cy / n]
    }
}

/// The four corners of a BEV box in CCW order.
pub fn corners(b: &BoxBev) -> ConvexPolygon {
    let (s, c) = b.theta.sin_cos();
    let hl = b.l / 2.0;
    let hw = b.w / 2.0;
    let local = [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]];
    let vertices = local
        .iter()
        .map(|[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
        .collect();
    ConvexPolygon { vertices }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn edge_intersection(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let r = [p2[0] - p1[0], p2[1] - p1[1]];
    let s = [b[0] - a[0], b[1] - a[1]];
    let den = r[0] * s[1] - r[1] * s[0];
    if den.abs() < 1e-300 {
        return None;
    }
    let t = ((a[0] - p1[0]) * s[1] - (a[1] - p1[1]) * s[0]) / den;
    Some([p1[0] + t * r[0], p1[1] + t * r[1]])
}

/// Clip `subject` against convex CCW `clip` (Sutherland-Hodgman).
pub fn clip_convex(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    let mut out = subject.vertices.clone();
    let cv = &clip.vertices;
    for i in 0..cv.len() {
        if out.is_empty() {
            break;
        }
        let e1 = cv[i];
        let e2 = cv[(i + 1) % cv.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(e1, e2, cur) >= 0.0;
            let prev_in = cross(e1, e2, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    if let Some(p) = edge_intersection(prev, cur, e1, e2) {
                        out.push(p);
                    }
                }
                out.push(cur);
            } else if prev_in {
                if let Some(p) = edge_intersection(prev, cur, e1, e2) {
                    out.push(p);
                }
            }
        }
    }
    // merge near-duplicate consecutive vertices
    let mut dedup: Vec<[f64; 2]> = Vec::with_capacity(out.len());
    for v in out {
        if let Some(last) = dedup.last() {
            if (v[0] - last[0]).abs() <= VERTEX_EPS && (v[1] - last[1]).abs() <= VERTEX_EPS {
                continue;
            }
        }
        dedup.push(v);
    }
    if dedup.len() >= 2 {
        let first = dedup[0];
        let last = *dedup.last().unwrap();
        if (first[0] - last[0]).abs() <= VERTEX_EPS && (first[1] - last[1]).abs() <= VERTEX_EPS {
            dedup.pop();
        }
    }
    ConvexPolygon { vertices: dedup }
}

/// Area of the BEV intersection of two boxes; 0 when disjoint or degenerate.
pub fn intersect_area(a: &BoxBev, b: &BoxBev) -> f64 {
    let area = clip_convex(&corners(a), &corners(b)).area();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Rotated BEV IoU via polygon clipping.
pub fn iou_bev(a: &BoxBev, b: &BoxBev) -> f64 {
    let inter = intersect_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rotated 3D IoU: BEV intersection area times vertical overlap over the
/// union of volumes.
pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    let bev_inter = intersect_area(&a.bev(), &b.bev());
    let zlo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let zhi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let dz = (zhi - zlo).max(0.0);
    let inter = bev_inter * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Which IoU-family value an orientation-decoupled evaluation produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    Iou,
    GIou,
    DIou,
}

/// Gradient of an OD value w.r.t. the predicted box's six non-theta
/// parameters. The theta derivative of every OD value is identically zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoxGrad {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdValue {
    pub value: f64,
    pub grad: BoxGrad,
}

/// Per-axis overlap / enclosing interval terms and their derivatives w.r.t.
/// the predicted center offset `d` and predicted extent `ep`.
struct AxisTerms {
    ov: f64,
    dov_d: f64,
    dov_e: f64,
    enc: f64,
    denc_d: f64,
    denc_e: f64,
}

/// Pred interval `[d - ep/2, d + ep/2]` against gt interval `[-eg/2, eg/2]`.
///
/// Away from ties these are the ordinary piecewise derivatives. At an exact
/// min/max tie the two one-sided derivatives are averaged, which makes the
/// reported subgradient vanish at exact alignment (pred == gt reports
/// gradient 0, as a maximum should).
fn axis_terms(d: f64, ep: f64, eg: f64) -> AxisTerms {
    let b_lo = d - ep / 2.0;
    let b_hi = d + ep / 2.0;
    let a_lo = -eg / 2.0;
    let a_hi = eg / 2.0;

    let ov = (b_hi.min(a_hi) - b_lo.max(a_lo)).max(0.0);
    let mut dov_d = 0.0;
    let mut dov_e = 0.0;
    if ov > 0.0 {
        let hi_share = if b_hi < a_hi {
            1.0
        } else if b_hi == a_hi {
            0.5
        } else {
            0.0
        };
        let lo_share = if b_lo > a_lo {
            1.0
        } else if b_lo == a_lo {
            0.5
        } else {
            0.0
        };
        dov_d = hi_share - lo_share;
        dov_e = 0.5 * (hi_share + lo_share);
    }

    let enc = b_hi.max(a_hi) - b_lo.min(a_lo);
    let hi_share = if b_hi > a_hi {
        1.0
    } else if b_hi == a_hi {
        0.5
    } else {
        0.0
    };
    let lo_share = if b_lo < a_lo {
        1.0
    } else if b_lo == a_lo {
        0.5
    } else {
        0.0
    };
    let denc_d = hi_share - lo_share;
    let denc_e = 0.5 * (hi_share + lo_share);

    AxisTerms { ov, dov_d, dov_e, enc, denc_d, denc_e }
}

/// Orientation-decoupled IoU/GIoU/DIoU of `pred` against `gt`.
///
/// `pred.theta` is replaced by `gt.theta` before evaluation, so the value is
/// the axis-aligned 3D IoU-family score of the two boxes in the gt frame.
/// GIoU uses the 3-axis enclosing box; DIoU subtracts the squared center
/// distance over the squared enclosing-box diagonal. Gradients are analytic
/// piecewise derivatives w.r.t. pred's `(cx, cy, cz, w, l, h)`; the theta
/// gradient is identically zero by construction.
pub fn od_iou_family(pred: &Box3d, gt: &Box3d, kind: IouKind) -> OdValue {
    let (s, c) = gt.theta.sin_cos();
    let rx = pred.cx - gt.cx;
    let ry = pred.cy - gt.cy;
    // pred center in the gt frame
    let dx = c * rx + s * ry;
    let dy = -s * rx + c * ry;
    let dz = pred.cz - gt.cz;

    let ax = axis_terms(dx, pred.l, gt.l);
    let ay = axis_terms(dy, pred.w, gt.w);
    let az = axis_terms(dz, pred.h, gt.h);

    let inter = ax.ov * ay.ov * az.ov;
    let vp = pred.l * pred.w * pred.h;
    let union = vp + gt.volume() - inter;
    let iou = inter / union;

    // d(inter) and d(union) w.r.t. (dx, dy, dz, l, w, h) in the gt frame
    let di = [
        ax.dov_d * ay.ov * az.ov,
        ax.ov * ay.dov_d * az.ov,
        ax.ov * ay.ov * az.dov_d,
        ax.dov_e * ay.ov * az.ov,
        ax.ov * ay.dov_e * az.ov,
        ax.ov * ay.ov * az.dov_e,
    ];
    let dvp = [0.0, 0.0, 0.0, pred.w * pred.h, pred.l * pred.h, pred.l * pred.w];
    let mut g = [0.0f64; 6]; // (dx, dy, dz, l, w, h)
    for i in 0..6 {
        let du = dvp[i] - di[i];
        g[i] = (di[i] * union - inter * du) / (union * union);
    }

    let mut value = iou;
    match kind {
        IouKind::Iou => {}
        IouKind::GIou => {
            // giou = iou - (C - U)/C = iou - 1 + U/C
            let cvol = ax.enc * ay.enc * az.enc;
            let dc = [
                ax.denc_d * ay.enc * az.enc,
                ax.enc * ay.denc_d * az.enc,
                ax.enc * ay.enc * az.denc_d,
                ax.denc_e * ay.enc * az.enc,
                ax.enc * ay.denc_e * az.enc,
                ax.enc * ay.enc * az.denc_e,
            ];
            value = iou - (cvol - union) / cvol;
            for i in 0..6 {
                let du = dvp[i] - di[i];
                g[i] += du / cvol - union * dc[i] / (cvol * cvol);
            }
        }
        IouKind::DIou => {
            // diou = iou - |center offset|^2 / |enclosing diagonal|^2
            let rho2 = dx * dx + dy * dy + dz * dz;
            let diag2 = ax.enc * ax.enc + ay.enc * ay.enc + az.enc * az.enc;
            value = iou - rho2 / diag2;
            let drho = [2.0 * dx, 2.0 * dy, 2.0 * dz, 0.0, 0.0, 0.0];
            let ddiag = [
                2.0 * ax.enc * ax.denc_d,
                2.0 * ay.enc * ay.denc_d,
                2.0 * az.enc * az.denc_d,
                2.0 * ax.enc * ax.denc_e,
                2.0 * ay.enc * ay.denc_e,
                2.0 * az.enc * az.denc_e,
            ];
            for i in 0..6 {
                g[i] -= (drho[i] * diag2 - rho2 * ddiag[i]) / (diag2 * diag2);
            }
        }
    }

    // rotate the center gradient back to the global frame
    let grad = BoxGrad {
        cx: c * g[0] - s * g[1],
        cy: s * g[0] + c * g[1],
        cz: g[2],
        l: g[3],
        w: g[4],
        h: g[5],
    };
    OdValue { value, grad }
}

/// Grid-counting IoU oracle, independent of the clipping path.
///
/// Counts grid cells (of side `cell`) whose centers fall inside each box and
/// inside both, using per-row interval arithmetic derived from the half-space
/// form of the rectangles. Converges to [`iou_bev`] as `cell -> 0`; identical
/// boxes give exactly 1 at any resolution.
pub fn rasterize_iou(a: &BoxBev, b: &BoxBev, cell: f64) -> f64 {
    assert!(cell > 0.0, "cell size must be positive");
    let (ax0, ax1, ay0, ay1) = bev_aabb(a);
    let (bx0, bx1, by0, by1) = bev_aabb(b);
    let x0 = ax0.min(bx0);
    let x1 = ax1.max(bx1);
    let y0 = ay0.min(by0);
    let y1 = ay1.max(by1);
    let nx = ((x1 - x0) / cell).ceil() as i64;
    let ny = ((y1 - y0) / cell).ceil() as i64;

    let mut na = 0i64;
    let mut nb = 0i64;
    let mut nab = 0i64;
    for iy in 0..ny {
        let y = y0 + (iy as f64 + 0.5) * cell;
        let ia = row_interval(a, y);
        let ib = row_interval(b, y);
        na += count_cells(ia, x0, cell, nx);
        nb += count_cells(ib, x0, cell, nx);
        let both = match (ia, ib) {
            (Some((l0, h0)), Some((l1, h1))) => {
                let lo = l0.max(l1);
                let hi = h0.min(h1);
                if lo <= hi {
                    Some((lo, hi))
                } else {
                    None
                }
            }
            _ => None,
        };
        nab += count_cells(both, x0, cell, nx);
    }
    let union = na + nb - nab;
    if union <= 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

fn bev_aabb(b: &BoxBev) -> (f64, f64, f64, f64) {
    let (s, c) = b.theta.sin_cos();
    let ex = (b.l / 2.0 * c).abs() + (b.w / 2.0 * s).abs();
    let ey = (b.l / 2.0 * s).abs() + (b.w / 2.0 * c).abs();
    (b.cx - ex, b.cx + ex, b.cy - ey, b.cy + ey)
}

/// Solve `|a*x + k| <= r` for x, intersecting with an existing interval.
fn halfspace_pair(
    a: f64,
    k: f64,
    r: f64,
    interval: Option<(f64, f64)>,
) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = interval?;
    if a.abs() < 1e-12 {
        if k.abs() <= r {
            return Some((lo, hi));
        }
        return None;
    }
    let mut t0 = (-r - k) / a;
    let mut t1 = (r - k) / a;
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    lo = lo.max(t0);
    hi = hi.min(t1);
    if lo <= hi {
        Some((lo, hi))
    } else {
        None
    }
}

/// The x-interval of a rotated rectangle along the horizontal line `y`.
fn row_interval(b: &BoxBev, y: f64) -> Option<(f64, f64)> {
    let (s, c) = b.theta.sin_cos();
    // along-heading: |c*(x - cx) + s*(y - cy)| <= l/2
    let i = halfspace_pair(c, s * (y - b.cy) - c * b.cx, b.l / 2.0, Some((f64::MIN, f64::MAX)))?;
    // across-heading: |-s*(x - cx) + c*(y - cy)| <= w/2
    halfspace_pair(-s, c * (y - b.cy) + s * b.cx, b.w / 2.0, Some(i))
}

/// Number of cell centers `x0 + (k + 0.5)*cell`, `0 <= k < nx`, inside `[lo, hi]`.
fn count_cells(interval: Option<(f64, f64)>, x0: f64, cell: f64, nx: i64) -> i64 {
    let Some((lo, hi)) = interval else { return 0 };
    let k_lo = (((lo - x0) / cell) - 0.5).ceil() as i64;
    let k_hi = (((hi - x0) / cell) - 0.5).floor() as i64;
    let k_lo = k_lo.max(0);
    let k_hi = k_hi.min(nx - 1);
    (k_hi - k_lo + 1).max(0)
}
