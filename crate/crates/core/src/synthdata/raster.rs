//! Pixel-center rasterization of the procedural shapes.

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y <= self.y1 && x >= self.x0 && x <= self.x1
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.y0 <= other.y1 && other.y0 <= self.y1 && self.x0 <= other.x1 && other.x0 <= self.x1
    }
}

/// Even-odd point-in-polygon over `(y, x)` vertices.
pub fn fill_polygon(h: usize, w: usize, vertices: &[(f64, f64)]) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut inside = false;
            let mut j = vertices.len() - 1;
            for i in 0..vertices.len() {
                let (yi, xi) = vertices[i];
                let (yj, xj) = vertices[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            mask[y * w + x] = inside;
        }
    }
    mask
}

pub fn fill_ellipse(h: usize, w: usize, center: (f64, f64), radii: (f64, f64), angle: f64) -> Vec<bool> {
    let (s, c) = angle.sin_cos();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - center.0;
            let dx = x as f64 + 0.5 - center.1;
            let u = (dx * c + dy * s) / radii.1;
            let v = (-dx * s + dy * c) / radii.0;
            mask[y * w + x] = u * u + v * v <= 1.0;
        }
    }
    mask
}

/// Union of thick segments through consecutive points.
pub fn fill_polyline(h: usize, w: usize, points: &[(f64, f64)], width: f64) -> Vec<bool> {
    let half = width / 2.0;
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (y as f64 + 0.5, x as f64 + 0.5);
            mask[y * w + x] = points.windows(2).any(|seg| segment_distance(p, seg[0], seg[1]) <= half);
        }
    }
    mask
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

/// Mask pixels whose 4-neighbourhood within `radius` steps is fully inside the mask.
pub fn erode(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if !prev[y * w + x] {
                    continue;
                }
                let keep = y > 0
                    && x > 0
                    && y + 1 < h
                    && x + 1 < w
                    && prev[(y - 1) * w + x]
                    && prev[(y + 1) * w + x]
                    && prev[y * w + x - 1]
                    && prev[y * w + x + 1];
                cur[y * w + x] = keep;
            }
        }
    }
    cur
}
