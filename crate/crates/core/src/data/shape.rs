//! Analytic shape definitions and their pixel masks.
//!
//! Every object is described by a compact [`ShapeSpec`] from which its mask is
//! a pure function, so dataset files store parameters instead of pixels and
//! reads rebuild masks bit-exactly.

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

/// The five shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ellipse,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ellipse,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Star => "star",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Ellipse => "ellipses",
            ShapeKind::Star => "stars",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Geometric parameters of one object; the mask derives from these.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Primary radius in pixels (circumradius for polygons, half-side for
    /// squares, semi-major axis for ellipses).
    pub size: f64,
    /// Minor/major axis ratio for ellipses; 1.0 elsewhere.
    pub aspect: f64,
    /// Rotation in radians for triangles and stars; 0 elsewhere.
    pub rotation: f64,
}

impl ShapeSpec {
    /// True if the continuous point lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Ellipse => {
                let a = self.size;
                let b = self.size * self.aspect;
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
            ShapeKind::Triangle | ShapeKind::Star => point_in_polygon(&self.vertices(), x, y),
        }
    }

    /// Polygon outline for the polygonal kinds (empty for the analytic ones).
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        match self.kind {
            ShapeKind::Triangle => (0..3)
                .map(|k| {
                    let th = self.rotation - std::f64::consts::FRAC_PI_2
                        + std::f64::consts::TAU * k as f64 / 3.0;
                    (self.cx + self.size * th.cos(), self.cy + self.size * th.sin())
                })
                .collect(),
            // Six-pointed star: tip spacing (60°) divides the 24-ray fan used
            // for polygon annotations, so rays can hit every spike exactly.
            ShapeKind::Star => (0..12)
                .map(|k| {
                    let r = if k % 2 == 0 { self.size } else { 0.55 * self.size };
                    let th = self.rotation - std::f64::consts::FRAC_PI_2
                        + std::f64::consts::TAU * k as f64 / 12.0;
                    (self.cx + r * th.cos(), self.cy + r * th.sin())
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Pixel mask on an `canvas`×`canvas` grid; only the shape's bounding
    /// window is scanned. Pixel (x, y) is set when its center is inside.
    pub fn mask(&self, canvas: usize) -> Mask {
        let mut m = Mask::new(canvas, canvas);
        let r = self.size + 1.0;
        let x0 = ((self.cx - r).floor().max(0.0)) as usize;
        let y0 = ((self.cy - r).floor().max(0.0)) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(canvas);
        let y1 = ((self.cy + r).ceil() as usize).min(canvas);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Validates that the shape lies fully inside the canvas with margin.
    pub fn fits(&self, canvas: usize) -> bool {
        let r = self.size + 1.0;
        self.cx - r >= 0.0
            && self.cy - r >= 0.0
            && self.cx + r <= canvas as f64
            && self.cy + r <= canvas as f64
    }
}

/// Even-odd point-in-polygon test.
fn point_in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    for i in 0..verts.len() {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % verts.len()];
        if (y1 <= y && y < y2) || (y2 <= y && y < y1) {
            let t = (y - y1) / (y2 - y1);
            if x < x1 + t * (x2 - x1) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Tight pixel-aligned bounds of a non-empty mask.
pub fn mask_bbox(mask: &Mask) -> Result<BBox<f64>> {
    let (h, w) = mask.size();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return Err(Error::Data("empty mask has no bounding box".into()));
    }
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

/// Centroid of mask pixel centers.
pub fn mask_centroid(mask: &Mask) -> Result<(f64, f64)> {
    let (h, w) = mask.size();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return Err(Error::Data("empty mask has no centroid".into()));
    }
    Ok((sx / n, sy / n))
}
