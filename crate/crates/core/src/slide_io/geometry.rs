//! Integer polygon geometry for region annotations.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A closed, simple polygon in base-magnification pixel coordinates.
///
/// The closing edge from the last vertex back to the first is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[i64; 2]>", into = "Vec<[i64; 2]>")]
pub struct Polygon {
    vertices: Vec<[i64; 2]>,
}

impl Polygon {
    /// Builds a polygon, dropping an explicit closing vertex and rejecting
    /// degenerate or self-intersecting outlines.
    pub fn new(mut vertices: Vec<[i64; 2]>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::Polygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let poly = Polygon { vertices };
        poly.validate_simple()?;
        Ok(poly)
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[[i64; 2]] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = ([i64; 2], [i64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace area (always non-negative).
    pub fn area(&self) -> f64 {
        let twice: i128 = self
            .edges()
            .map(|(a, b)| a[0] as i128 * b[1] as i128 - b[0] as i128 * a[1] as i128)
            .sum();
        (twice.abs() as f64) / 2.0
    }

    /// Inclusive bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (i64, i64, i64, i64) {
        let mut b = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for v in &self.vertices {
            b.0 = b.0.min(v[0]);
            b.1 = b.1.min(v[1]);
            b.2 = b.2.max(v[0]);
            b.3 = b.3.max(v[1]);
        }
        b
    }

    /// Inside-or-on-boundary test using the winding number with exact
    /// integer orientation tests. Query coordinates are doubled internally
    /// so half-pixel centres are representable.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        self.contains_doubled(2 * x, 2 * y)
    }

    /// Same as [`Polygon::contains`] for a point given in half-pixel units
    /// (`(2x, 2y)`).
    pub fn contains_doubled(&self, px: i64, py: i64) -> bool {
        let (x0, y0, x1, y1) = self.bbox();
        if px < 2 * x0 || px > 2 * x1 || py < 2 * y0 || py > 2 * y1 {
            return false;
        }
        let p = [px as i128, py as i128];
        let mut winding = 0i32;
        for (a, b) in self.edges() {
            let a = [2 * a[0] as i128, 2 * a[1] as i128];
            let b = [2 * b[0] as i128, 2 * b[1] as i128];
            let cross = orient(a, b, p);
            if cross == 0 && within_box(a, b, p) {
                return true;
            }
            if a[1] <= p[1] {
                if b[1] > p[1] && cross > 0 {
                    winding += 1;
                }
            } else if b[1] <= p[1] && cross < 0 {
                winding -= 1;
            }
        }
        winding != 0
    }

    fn validate_simple(&self) -> Result<()> {
        let n = self.vertices.len();
        for i in 0..n {
            if self.vertices[i] == self.vertices[(i + 1) % n] {
                return Err(Error::Polygon(format!("repeated vertex at index {i}")));
            }
        }
        if self.area() == 0.0 {
            return Err(Error::Polygon("zero area".into()));
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                if adjacent {
                    // Adjacent edges share exactly one endpoint; they may only
                    // overlap if they fold back onto each other.
                    let shared = if j == i + 1 { b } else { a };
                    let (p, q) = if j == i + 1 { (a, d) } else { (b, c) };
                    let (s, p, q) = (widen(shared), widen(p), widen(q));
                    if orient(s, p, q) == 0 && (p[0] - s[0]) * (q[0] - s[0]) + (p[1] - s[1]) * (q[1] - s[1]) > 0 {
                        return Err(Error::Polygon(format!("edges {i} and {j} overlap")));
                    }
                    continue;
                }
                if segments_intersect(widen(a), widen(b), widen(c), widen(d)) {
                    return Err(Error::Polygon(format!("self-intersection between edges {i} and {j}")));
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<[i64; 2]>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<[i64; 2]>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<[i64; 2]> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

fn widen(p: [i64; 2]) -> [i128; 2] {
    [p[0] as i128, p[1] as i128]
}

fn orient(a: [i128; 2], b: [i128; 2], c: [i128; 2]) -> i128 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn within_box(a: [i128; 2], b: [i128; 2], p: [i128; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: [i128; 2], b: [i128; 2], c: [i128; 2], d: [i128; 2]) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)) {
        return true;
    }
    (d1 == 0 && within_box(c, d, a))
        || (d2 == 0 && within_box(c, d, b))
        || (d3 == 0 && within_box(a, b, c))
        || (d4 == 0 && within_box(a, b, d))
}

/// True iff `(x, y)` lies inside or on the boundary of any polygon.
pub fn point_in_region(x: i64, y: i64, polygons: &[Polygon]) -> bool {
    polygons.iter().any(|p| p.contains(x, y))
}
