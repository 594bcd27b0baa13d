//! Polygon instance masks, rasterization, and IoU.
//!
//! Masks are encoded as N boundary points around a center, found by casting
//! rays from the center at uniform angles and keeping the farthest boundary
//! crossing per ray. Rasterization uses even-odd scanline fill sampled at
//! pixel centers, and IoU comes in box and mask flavors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Binary mask on an H×W pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    /// Builds a mask by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.bits[y * w + x] = f(x, y);
            }
        }
        m
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.w && y < self.h && self.bits[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        if x < self.w && y < self.h {
            self.bits[y * self.w + x] = v;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    /// Intersection over union; masks on different canvases are rejected.
    /// An empty union gives 0 by convention.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if self.size() != other.size() {
            return Err(Error::Geometry(format!(
                "mask size mismatch: {:?} vs {:?}",
                self.size(),
                other.size()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            Ok(0.0)
        } else {
            Ok(inter as f64 / union as f64)
        }
    }
}

/// Axis-aligned box; degenerate (zero width/height) boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox<F> {
    pub x1: F,
    pub y1: F,
    pub x2: F,
    pub y2: F,
}

impl<F: Scalar> BBox<F> {
    pub fn new(x1: F, y1: F, x2: F, y2: F) -> Result<BBox<F>> {
        if x1 > x2 || y1 > y2 {
            return Err(Error::Geometry(format!(
                "box corners out of order: ({:?}, {:?}) .. ({:?}, {:?})",
                x1.as_f64(),
                y1.as_f64(),
                x2.as_f64(),
                y2.as_f64()
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn center(&self) -> (F, F) {
        let two = F::of(2.0);
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).as_f64() * (self.y2 - self.y1).as_f64()
    }
}

/// Box IoU in `f64`; an empty union (two degenerate boxes) gives 0.
pub fn box_iou<F: Scalar>(a: &BBox<F>, b: &BBox<F>) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).as_f64().max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).as_f64().max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Instance mask as a center plus N boundary-point offsets, ordered by the
/// polar angle of the casting ray.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolygonMask<F> {
    pub center: (F, F),
    /// Offsets from the center, one per ray, angle-ordered.
    pub points: Vec<(F, F)>,
}

impl<F: Scalar> PolygonMask<F> {
    /// Absolute vertex positions, center + offset.
    pub fn vertices(&self) -> Vec<(F, F)> {
        self.points
            .iter()
            .map(|&(dx, dy)| (self.center.0 + dx, self.center.1 + dy))
            .collect()
    }

    /// True when the offsets are sorted by polar angle up to one cyclic wrap,
    /// the defining invariant of ray-cast polygons.
    pub fn is_angle_sorted(&self) -> bool {
        let angles: Vec<f64> = self
            .points
            .iter()
            .map(|&(dx, dy)| dy.as_f64().atan2(dx.as_f64()).rem_euclid(std::f64::consts::TAU))
            .collect();
        let wraps = angles
            .windows(2)
            .filter(|p| p[1] < p[0])
            .count();
        wraps <= 1
    }
}

/// Tight axis-aligned bounds of the center and all boundary points.
pub fn box_from_polygon<F: Scalar>(poly: &PolygonMask<F>) -> BBox<F> {
    let (mut x1, mut y1) = poly.center;
    let (mut x2, mut y2) = poly.center;
    for (vx, vy) in poly.vertices() {
        x1 = x1.min(vx);
        y1 = y1.min(vy);
        x2 = x2.max(vx);
        y2 = y2.max(vy);
    }
    BBox { x1, y1, x2, y2 }
}

/// How the casting center was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterStatus {
    /// Component centroid (the normal case).
    Centroid,
    /// Centroid fell outside the component; used the inner-most component
    /// pixel (distance-transform argmax) instead.
    InnerFallback,
}

/// Largest 4-connected component of the mask, as a fresh mask.
fn largest_component(mask: &Mask) -> Option<Mask> {
    let (h, w) = mask.size();
    let mut label = vec![usize::MAX; h * w];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        label[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if mask.bits[q] && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    // First-found wins ties, which is deterministic in scan order.
    let best = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i))?;
    let mut out = Mask::new(h, w);
    for p in 0..h * w {
        out.bits[p] = label[p] == best;
    }
    Some(out)
}

/// Inner-most pixel of the component: the cell with maximal 4-connected BFS
/// distance to the outside. Deterministic argmax by scan order.
fn innermost_point(component: &Mask) -> (f64, f64) {
    let (h, w) = component.size();
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !component.bits[p] {
                continue;
            }
            let at_border = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !component.bits[p - 1]
                || !component.bits[p + 1]
                || !component.bits[p - w]
                || !component.bits[p + w];
            if at_border {
                dist[p] = 0;
                queue.push_back(p);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        let (x, y) = (p % w, p / w);
        let d = dist[p] + 1;
        let mut visit = |q: usize| {
            if component.bits[q] && dist[q] == usize::MAX {
                dist[q] = d;
                queue.push_back(q);
            }
        };
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < w {
            visit(p + 1);
        }
        if y > 0 {
            visit(p - w);
        }
        if y + 1 < h {
            visit(p + w);
        }
    }
    let mut best = (0usize, 0usize);
    for p in 0..h * w {
        if component.bits[p] && dist[p] != usize::MAX && dist[p] > best.0 {
            best = (dist[p], p);
        }
    }
    let p = best.1;
    ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5)
}

/// Extracts an N-point polygon from a binary mask by casting rays from the
/// component center at angles `angle_offset + 2πi/N` and keeping the farthest
/// boundary crossing per ray. The offset defaults to 0 via
/// [`polygon_from_mask`]; it exists so callers can align rays with known
/// geometry (e.g. square corners).
pub fn polygon_from_mask_at(
    mask: &Mask,
    n: usize,
    angle_offset: f64,
) -> Result<(PolygonMask<f64>, CenterStatus)> {
    if n < 3 {
        return Err(Error::Geometry(format!("need at least 3 points, got {n}")));
    }
    if mask.is_empty() {
        return Err(Error::Geometry("cannot trace an empty mask".into()));
    }
    let component = largest_component(mask).expect("non-empty mask has a component");
    let (h, w) = component.size();

    // Centroid of pixel centers; fall back to the inner-most pixel when the
    // centroid lands off-component (non-convex shapes).
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            if component.get(x, y) {
                cx += x as f64 + 0.5;
                cy += y as f64 + 0.5;
                count += 1.0;
            }
        }
    }
    cx /= count;
    cy /= count;
    let inside = |px: f64, py: f64| -> bool {
        px >= 0.0 && py >= 0.0 && component.get(px.floor() as usize, py.floor() as usize)
    };
    let (center, status) = if inside(cx, cy) {
        ((cx, cy), CenterStatus::Centroid)
    } else {
        (innermost_point(&component), CenterStatus::InnerFallback)
    };

    // Farthest crossing per ray: coarse march to find the last radius still
    // inside the component, then bisect the exit point.
    let r_max = ((h * h + w * w) as f64).sqrt() + 1.0;
    let coarse = 0.5;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let theta = angle_offset + std::f64::consts::TAU * i as f64 / n as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let mut last_in = 0.0f64;
        let mut r = 0.0f64;
        while r <= r_max {
            if inside(center.0 + r * dx, center.1 + r * dy) {
                last_in = r;
            }
            r += coarse;
        }
        let (mut lo, mut hi) = (last_in, last_in + coarse);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if inside(center.0 + mid * dx, center.1 + mid * dy) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        points.push((lo * dx, lo * dy));
    }
    Ok((PolygonMask { center, points }, status))
}

/// [`polygon_from_mask_at`] with rays starting at angle 0.
pub fn polygon_from_mask(mask: &Mask, n: usize) -> Result<(PolygonMask<f64>, CenterStatus)> {
    polygon_from_mask_at(mask, n, 0.0)
}

/// Even-odd scanline fill sampled at pixel centers; vertices may lie outside
/// the canvas, only in-canvas pixels are written.
pub fn rasterize<F: Scalar>(poly: &PolygonMask<F>, size: (usize, usize)) -> Mask {
    let (h, w) = size;
    let verts: Vec<(f64, f64)> = poly
        .vertices()
        .into_iter()
        .map(|(x, y)| (x.as_f64(), y.as_f64()))
        .collect();
    let mut mask = Mask::new(h, w);
    if verts.len() < 3 {
        return mask;
    }
    for row in 0..h {
        let yc = row as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..verts.len() {
            let (x1, y1) = verts[i];
            let (x2, y2) = verts[(i + 1) % verts.len()];
            if y1 == y2 {
                continue; // horizontal edges contribute no crossings
            }
            // Half-open span so shared vertices count once.
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                let t = (yc - y1) / (y2 - y1);
                xs.push(x1 + t * (x2 - x1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for pair in xs.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            // Pixel centers x+0.5 in [a, b).
            let start = (a - 0.5).ceil().max(0.0) as usize;
            for x in start..w {
                let xc = x as f64 + 0.5;
                if xc >= b {
                    break;
                }
                if xc >= a {
                    mask.set(x, row, true);
                }
            }
        }
    }
    mask
}

/// Area ratio of a regular N-gon inscribed in a disc: `(N/2π)·sin(2π/N)`.
/// The analytic ceiling for how well an N-point polygon can reproduce a disc.
pub fn inscribed_polygon_area_ratio(n: usize) -> f64 {
    let tau = std::f64::consts::TAU;
    (n as f64 / tau) * (tau / n as f64).sin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{PI, TAU};

    fn disc_mask(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |x, y| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            dx * dx + dy * dy <= r * r
        })
    }

    #[test]
    fn square_corners_recovered_with_diagonal_rays() {
        // Filled square spanning pixels [16, 48) in both axes, center (32, 32).
        let mask = Mask::from_fn(64, 64, |x, y| (16..48).contains(&x) && (16..48).contains(&y));
        let (poly, status) = polygon_from_mask_at(&mask, 4, PI / 4.0).unwrap();
        assert_eq!(status, CenterStatus::Centroid);
        assert!((poly.center.0 - 32.0).abs() < 1e-9);
        assert!((poly.center.1 - 32.0).abs() < 1e-9);
        let want = [(48.0, 48.0), (16.0, 48.0), (16.0, 16.0), (48.0, 16.0)];
        for (got, want) in poly.vertices().iter().zip(want) {
            assert!(
                (got.0 - want.0).abs() < 1.0 && (got.1 - want.1).abs() < 1.0,
                "corner {got:?} vs {want:?}"
            );
        }
    }

    #[test]
    fn disc_boundary_points_sit_at_the_radius() {
        let mask = disc_mask(128, 128, 64.0, 64.0, 40.0);
        for n in [3, 8, 16, 24] {
            let (poly, _) = polygon_from_mask(&mask, n).unwrap();
            for &(dx, dy) in &poly.points {
                let d = (dx * dx + dy * dy).sqrt();
                assert!((d - 40.0).abs() <= 1.0, "n={n} radius {d}");
            }
        }
    }

    #[test]
    fn disc_reconstruction_iou_matches_inscribed_polygon_ratio() {
        let mask = disc_mask(128, 128, 64.0, 64.0, 48.0);
        for n in [8, 16, 24] {
            let (poly, _) = polygon_from_mask(&mask, n).unwrap();
            let recon = rasterize(&poly, (128, 128));
            let iou = recon.iou(&mask).unwrap();
            let want = inscribed_polygon_area_ratio(n);
            assert!(
                (iou - want).abs() <= 0.02,
                "n={n}: iou {iou:.4} vs analytic {want:.4}"
            );
        }
    }

    #[test]
    fn analytic_ratio_has_the_known_values() {
        assert!((inscribed_polygon_area_ratio(8) - 0.9003).abs() < 1e-4);
        assert!(inscribed_polygon_area_ratio(24) > inscribed_polygon_area_ratio(16));
        assert!(inscribed_polygon_area_ratio(16) > inscribed_polygon_area_ratio(8));
    }

    #[test]
    fn triangle_covering_the_canvas_rasterizes_to_all_ones() {
        let poly = PolygonMask {
            center: (4.0f64, 4.0),
            points: vec![(-30.0, -24.0), (60.0, -24.0), (-30.0, 66.0)],
        };
        let mask = rasterize(&poly, (16, 16));
        assert_eq!(mask.count_ones(), 256);
    }

    #[test]
    fn degenerate_polygon_rasterizes_to_all_zeros() {
        let poly = PolygonMask {
            center: (8.0f64, 8.0),
            points: vec![(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
        };
        assert!(rasterize(&poly, (16, 16)).is_empty());
        let line = PolygonMask {
            center: (8.0f64, 8.0),
            points: vec![(-3.0, 0.0), (0.0, 0.0), (3.0, 0.0)],
        };
        assert!(rasterize(&line, (16, 16)).is_empty());
    }

    #[test]
    fn mask_iou_identity_disjoint_and_mismatch() {
        let a = disc_mask(32, 32, 10.0, 10.0, 5.0);
        let b = disc_mask(32, 32, 25.0, 25.0, 4.0);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&b).unwrap(), 0.0);
        assert!(a.iou(&Mask::new(16, 16)).is_err());
        assert_eq!(Mask::new(8, 8).iou(&Mask::new(8, 8)).unwrap(), 0.0);
    }

    #[test]
    fn unit_squares_overlapping_by_half_have_iou_one_third() {
        let a = BBox::new(0.0f64, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::new(0.5f64, 0.0, 1.5, 1.0).unwrap();
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(box_iou(&a, &a), 1.0);
        let far = BBox::new(5.0f64, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(box_iou(&a, &far), 0.0);
    }

    #[test]
    fn box_from_polygon_bounds_square_and_disc() {
        let square = PolygonMask {
            center: (32.0f64, 32.0),
            points: vec![(16.0, 16.0), (-16.0, 16.0), (-16.0, -16.0), (16.0, -16.0)],
        };
        let b = box_from_polygon(&square);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (16.0, 16.0, 48.0, 48.0));

        // Many-point disc polygon: bounds approach the disc's box.
        let n = 256;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = TAU * i as f64 / n as f64;
                (40.0 * t.cos(), 40.0 * t.sin())
            })
            .collect();
        let disc = PolygonMask {
            center: (64.0f64, 64.0),
            points,
        };
        let b = box_from_polygon(&disc);
        for (got, want) in [(b.x1, 24.0), (b.y1, 24.0), (b.x2, 104.0), (b.y2, 104.0)] {
            assert!((got - want).abs() < 0.5);
        }

        // Sub-pixel polygon: degenerate box is allowed.
        let dot = PolygonMask {
            center: (5.0f64, 5.0),
            points: vec![(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
        };
        let b = box_from_polygon(&dot);
        assert_eq!((b.x1, b.x2), (5.0, 5.0));
        assert!(BBox::new(5.0f64, 5.0, 5.0, 5.0).is_ok());
        assert!(BBox::new(6.0f64, 0.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn centroid_outside_component_falls_back_to_inner_point() {
        // Three-quarter annulus: the centroid lands in the hole.
        let mask = Mask::from_fn(96, 96, |x, y| {
            let dx = x as f64 + 0.5 - 48.0;
            let dy = y as f64 + 0.5 - 48.0;
            let r = (dx * dx + dy * dy).sqrt();
            let ang = dy.atan2(dx);
            (30.0..38.0).contains(&r) && !(0.0..PI / 2.0).contains(&ang)
        });
        let (poly, status) = polygon_from_mask(&mask, 8).unwrap();
        assert_eq!(status, CenterStatus::InnerFallback);
        let (cx, cy) = poly.center;
        assert!(mask.get(cx.floor() as usize, cy.floor() as usize));
    }

    #[test]
    fn empty_mask_and_tiny_n_are_rejected() {
        assert!(polygon_from_mask(&Mask::new(32, 32), 8).is_err());
        let mask = disc_mask(32, 32, 16.0, 16.0, 5.0);
        assert!(polygon_from_mask(&mask, 2).is_err());
    }

    #[test]
    fn ray_cast_polygons_are_angle_sorted() {
        let mask = disc_mask(64, 64, 30.0, 34.0, 20.0);
        for n in [3, 5, 8, 14, 24] {
            let (poly, _) = polygon_from_mask(&mask, n).unwrap();
            assert!(poly.is_angle_sorted(), "n={n}");
            assert_eq!(poly.points.len(), n);
        }
    }

    /// Random convex masks for refinement tests: axis-aligned ellipses.
    fn random_ellipse(rng: &mut impl Rng) -> Mask {
        let cx = rng.gen_range(40.0..88.0);
        let cy = rng.gen_range(40.0..88.0);
        let a = rng.gen_range(14.0..30.0);
        let b = rng.gen_range(14.0..30.0);
        Mask::from_fn(128, 128, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / a;
            let dy = (y as f64 + 0.5 - cy) / b;
            dx * dx + dy * dy <= 1.0
        })
    }

    #[test]
    fn convex_reconstruction_at_24_points_reaches_085_iou() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mask = random_ellipse(&mut rng);
            let (poly, _) = polygon_from_mask(&mask, 24).unwrap();
            let recon = rasterize(&poly, mask.size());
            let iou = recon.iou(&mask).unwrap();
            assert!(iou >= 0.85, "iou {iou}");
        }
    }

    #[test]
    fn refinement_improves_with_more_points_on_convex_masks() {
        // The four angle sets are not nested, so a single mask may regress
        // slightly when N grows (worst observed on this family: 0.0163 at
        // 14 -> 16). Per-mask drops are bounded by a frozen 0.02 and the
        // population mean must strictly improve at every step.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ns = [8usize, 14, 16, 24];
        let mut sums = [0.0f64; 4];
        for _ in 0..100 {
            let mask = random_ellipse(&mut rng);
            let mut prev = 0.0;
            for (k, &n) in ns.iter().enumerate() {
                let (poly, _) = polygon_from_mask(&mask, n).unwrap();
                let iou = rasterize(&poly, mask.size()).iou(&mask).unwrap();
                assert!(iou >= prev - 0.02, "n={n}: {iou} after {prev}");
                sums[k] += iou;
                prev = iou;
            }
        }
        for k in 1..4 {
            assert!(sums[k] > sums[k - 1], "mean IoU not increasing: {sums:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mask_iou_is_symmetric_and_translation_invariant(
            seed in 0u64..1000,
            dx in 0usize..20,
            dy in 0usize..20,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = disc_mask(96, 96, rng.gen_range(20.0..50.0), rng.gen_range(20.0..50.0), rng.gen_range(5.0..15.0));
            let b = disc_mask(96, 96, rng.gen_range(20.0..50.0), rng.gen_range(20.0..50.0), rng.gen_range(5.0..15.0));
            let iou = a.iou(&b).unwrap();
            prop_assert_eq!(b.iou(&a).unwrap(), iou);
            let shift = |m: &Mask| {
                Mask::from_fn(96, 96, |x, y| {
                    x >= dx && y >= dy && m.get(x - dx, y - dy)
                })
            };
            // Both discs fit in the upper-left 70x70 region, so the shift
            // never clips and IoU is preserved exactly.
            prop_assert_eq!(shift(&a).iou(&shift(&b)).unwrap(), iou);
        }
    }
}
