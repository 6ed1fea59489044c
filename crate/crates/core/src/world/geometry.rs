//! Planar geometry for oriented boxes: corners, ray casting and polygon
//! overlap.

use super::ObjectBox;

pub type Point = (f64, f64);

pub fn corners(b: &ObjectBox) -> [Point; 4] {
    let (c, s) = ((b.yaw as f64).cos(), (b.yaw as f64).sin());
    let (hl, hw) = (b.size_lw[0] as f64 / 2.0, b.size_lw[1] as f64 / 2.0);
    let (cx, cy) = (b.center_xy[0] as f64, b.center_xy[1] as f64);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .map(|(u, v)| (cx + u * c - v * s, cy + u * s + v * c))
}

/// Entry and exit distances of the ray from the origin along `azimuth`,
/// if it crosses the box in front of the origin.
pub fn ray_box(b: &ObjectBox, azimuth: f64) -> Option<(f64, f64)> {
    let (dx, dy) = (azimuth.cos(), azimuth.sin());
    let (c, s) = ((b.yaw as f64).cos(), (b.yaw as f64).sin());
    // ray expressed in the box frame
    let (ox, oy) = (-(b.center_xy[0] as f64), -(b.center_xy[1] as f64));
    let o = (ox * c + oy * s, -ox * s + oy * c);
    let d = (dx * c + dy * s, -dx * s + dy * c);
    let half = [b.size_lw[0] as f64 / 2.0, b.size_lw[1] as f64 / 2.0];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (oi, di, h) in [(o.0, d.0, half[0]), (o.1, d.1, half[1])] {
        if di.abs() < 1e-12 {
            if oi.abs() > h {
                return None;
            }
            continue;
        }
        let (a, bnd) = ((-h - oi) / di, (h - oi) / di);
        t0 = t0.max(a.min(bnd));
        t1 = t1.min(a.max(bnd));
    }
    (t1 >= t0 && t0 > 0.0).then_some((t0, t1))
}

fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Sutherland–Hodgman clip of a convex `subject` by a counter-clockwise
/// convex `clip` polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: Point| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

pub fn intersection_area(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let inter = clip_convex(&corners(a), &corners(b));
    if inter.len() < 3 {
        0.0
    } else {
        polygon_area(&inter)
    }
}

pub fn iou(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn contains(b: &ObjectBox, p: Point) -> bool {
    let (c, s) = ((b.yaw as f64).cos(), (b.yaw as f64).sin());
    let (rx, ry) = (p.0 - b.center_xy[0] as f64, p.1 - b.center_xy[1] as f64);
    let (u, v) = (rx * c + ry * s, -rx * s + ry * c);
    u.abs() <= b.size_lw[0] as f64 / 2.0 && v.abs() <= b.size_lw[1] as f64 / 2.0
}
