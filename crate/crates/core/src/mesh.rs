//! Planar triangulations, point location and the piecewise-linear basis.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Relative tolerance band used by the orientation predicates.
const ORIENT_TOL: f64 = 1e-12;

/// Axis-aligned rectangle in km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// A planar triangulation with counter-clockwise triangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

/// On-disk mesh document. `elevation`, when present, holds one covariate
/// value per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshFile {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<Vec<f64>>,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Builds a conforming triangulation of a rectangle. Every grid cell is split
/// along its lower-left to upper-right diagonal, which makes the stiffness
/// matrix the 5-point Laplacian and keeps all lumped masses equal.
pub fn build_structured_mesh(extent: Extent, resolution: f64) -> Result<TriangleMesh> {
    let (w, h) = (extent.width(), extent.height());
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::DegenerateMesh(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::DegenerateMesh(format!("extent {w} x {h} km has no area")));
    }
    if resolution > w || resolution > h {
        return Err(Error::DegenerateMesh(format!(
            "resolution {resolution} km exceeds extent {w} x {h} km"
        )));
    }
    // Interval counts; the small slack keeps exact multiples (500 / 25) from
    // rounding up.
    let cells = |len: f64| ((len / resolution) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let (nx, ny) = (cells(w), cells(h));
    let (dx, dy) = (w / nx as f64, h / ny as f64);

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([extent.x_min + i as f64 * dx, extent.y_min + j as f64 * dy]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    Ok(TriangleMesh { nodes, triangles })
}

impl TriangleMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_vertices(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounding_box(&self) -> Extent {
        let mut e = Extent::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.nodes {
            e.x_min = e.x_min.min(p[0]);
            e.y_min = e.y_min.min(p[1]);
            e.x_max = e.x_max.max(p[0]);
            e.y_max = e.y_max.max(p[1]);
        }
        e
    }

    /// Checks indices, orientation, edge conformity and non-overlap.
    pub fn validate(&self) -> Result<()> {
        let m = self.nodes.len();
        if m == 0 || self.triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no nodes or no triangles".into()));
        }
        for (i, p) in self.nodes.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::InvalidMesh(format!("node {i} has non-finite coordinates")));
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= m) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references node {bad} but the mesh has {m} nodes"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} repeats a node")));
            }
            let area = self.triangle_area(t);
            if !(area > 0.0) {
                return Err(Error::ZeroAreaTriangle { index: t, area });
            }
        }
        // Each directed edge may appear once; an interior edge appears once in
        // each direction.
        let mut directed = std::collections::HashSet::with_capacity(3 * self.triangles.len());
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let e = (tri[k], tri[(k + 1) % 3]);
                if !directed.insert(e) {
                    return Err(Error::InvalidMesh(format!(
                        "edge ({}, {}) of triangle {t} is shared with inconsistent orientation",
                        e.0, e.1
                    )));
                }
            }
        }
        // Non-overlap: every centroid must be covered by exactly one triangle.
        let locator = PointLocator::new(self);
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_vertices(t);
            let g = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
            let hits = locator.containing(self, g).count();
            if hits != 1 {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} overlaps {} other triangle(s)",
                    hits.saturating_sub(1)
                )));
            }
        }
        Ok(())
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangle_vertices(t);
        let area = signed_area(a, b, c);
        [
            signed_area(p, b, c) / area,
            signed_area(a, p, c) / area,
            signed_area(a, b, p) / area,
        ]
    }

    /// Renumbers nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> TriangleMesh {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        TriangleMesh {
            nodes: perm.iter().map(|&old| self.nodes[old]).collect(),
            triangles: self
                .triangles
                .iter()
                .map(|t| [inverse[t[0]], inverse[t[1]], inverse[t[2]]])
                .collect(),
        }
    }
}

fn inside(bary: &[f64; 3]) -> bool {
    bary.iter().all(|&l| l >= -ORIENT_TOL)
}

/// Uniform bucket grid over the mesh bounding box for point location.
#[derive(Debug, Clone)]
pub struct PointLocator {
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let bb = mesh.bounding_box();
        let side = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let dims = [side, side];
        let span = [
            (bb.width()).max(f64::MIN_POSITIVE),
            (bb.height()).max(f64::MIN_POSITIVE),
        ];
        let cell = [span[0] / dims[0] as f64, span[1] / dims[1] as f64];
        let mut locator = Self {
            origin: [bb.x_min, bb.y_min],
            cell,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1]],
        };
        for t in 0..mesh.triangles.len() {
            let v = mesh.triangle_vertices(t);
            let lo = locator.bucket_of([
                v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
            ]);
            let hi = locator.bucket_of([
                v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
                v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
            ]);
            for by in lo[1]..=hi[1] {
                for bx in lo[0]..=hi[0] {
                    locator.buckets[by * dims[0] + bx].push(t);
                }
            }
        }
        locator
    }

    fn bucket_of(&self, p: [f64; 2]) -> [usize; 2] {
        let mut out = [0; 2];
        for k in 0..2 {
            let f = ((p[k] - self.origin[k]) / self.cell[k]).floor();
            out[k] = f.clamp(0.0, (self.dims[k] - 1) as f64) as usize;
        }
        out
    }

    fn containing<'a>(&'a self, mesh: &'a TriangleMesh, p: [f64; 2]) -> impl Iterator<Item = usize> + 'a {
        let b = self.bucket_of(p);
        self.buckets[b[1] * self.dims[0] + b[0]]
            .iter()
            .copied()
            .filter(move |&t| inside(&mesh.barycentric(t, p)))
    }

    /// Lowest-index triangle containing `p` (boundary points included).
    pub fn locate(&self, mesh: &TriangleMesh, p: [f64; 2]) -> Option<usize> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return None;
        }
        // Buckets hold triangle indices in increasing order.
        self.containing(mesh, p).next()
    }
}

/// Sparse interpolation operator from node weights to point values.
#[derive(Debug, Clone)]
pub struct Projector {
    /// `n_locations x m` barycentric weights.
    pub a: CsMat<f64>,
    /// Rows whose location lies outside every triangle (left empty in `a`).
    pub outside: Vec<usize>,
}

impl Projector {
    pub fn is_complete(&self) -> bool {
        self.outside.is_empty()
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.a.rows()];
        for (row, vec) in self.a.outer_iterator().enumerate() {
            out[row] = vec.iter().map(|(c, &v)| v * w[c]).sum();
        }
        out
    }

    /// Nonzero (column, weight) pairs of one row.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        self.a
            .outer_view(i)
            .map(|r| r.iter().map(|(c, &v)| (c, v)).collect())
            .unwrap_or_default()
    }

    /// Errors listing the first location outside the mesh, if any.
    pub fn require_complete(&self, locations: &[[f64; 2]]) -> Result<()> {
        match self.outside.first() {
            None => Ok(()),
            Some(&i) => Err(Error::OutsideMesh {
                index: i,
                x: locations[i][0],
                y: locations[i][1],
            }),
        }
    }
}

/// Barycentric projection of `locations` onto the mesh basis functions.
pub fn project(mesh: &TriangleMesh, locations: &[[f64; 2]]) -> Projector {
    let locator = PointLocator::new(mesh);
    project_with(mesh, &locator, locations)
}

pub fn project_with(mesh: &TriangleMesh, locator: &PointLocator, locations: &[[f64; 2]]) -> Projector {
    let mut tri = TriMat::new((locations.len(), mesh.node_count()));
    let mut outside = Vec::new();
    for (row, &p) in locations.iter().enumerate() {
        match locator.locate(mesh, p) {
            Some(t) => {
                let bary = mesh.barycentric(t, p);
                // Clamp the tolerance band and renormalise so rows sum to one.
                let clipped = bary.map(|l| l.max(0.0));
                let s: f64 = clipped.iter().sum();
                for (k, &node) in mesh.triangles[t].iter().enumerate() {
                    let wgt = clipped[k] / s;
                    if wgt > 0.0 {
                        tri.add_triplet(row, node, wgt);
                    }
                }
            }
            None => outside.push(row),
        }
    }
    Projector {
        a: tri.to_csr(),
        outside,
    }
}

impl MeshFile {
    pub fn into_parts(self) -> (TriangleMesh, Option<Vec<f64>>) {
        (
            TriangleMesh {
                nodes: self.nodes,
                triangles: self.triangles,
            },
            self.elevation,
        )
    }

    pub fn from_mesh(mesh: &TriangleMesh, elevation: Option<Vec<f64>>) -> Self {
        Self {
            nodes: mesh.nodes.clone(),
            triangles: mesh.triangles.clone(),
            elevation,
        }
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
