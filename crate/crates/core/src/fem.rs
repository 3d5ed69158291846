//! Finite element structure matrices for piecewise-linear elements.

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

/// Lumped mass `C` (stored as its diagonal) and stiffness `G`.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// `C_ii = ∫ψ_i`, km².
    pub c: Vec<f64>,
    /// `G_ij = ∫∇ψ_i·∇ψ_j`, symmetric, full storage, CSC.
    pub g: CsMat<f64>,
}

impl FemMatrices {
    pub fn size(&self) -> usize {
        self.c.len()
    }
}

/// Element stiffness for one triangle with counter-clockwise vertices.
pub fn element_stiffness(v: [[f64; 2]; 3]) -> Result<[[f64; 3]; 3]> {
    let area = 0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]));
    if !(area > 0.0) {
        return Err(Error::ZeroAreaTriangle { index: 0, area });
    }
    // Edge opposite vertex i.
    let e: [[f64; 2]; 3] = std::array::from_fn(|i| {
        let (a, b) = (v[(i + 1) % 3], v[(i + 2) % 3]);
        [b[0] - a[0], b[1] - a[1]]
    });
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (e[i][0] * e[j][0] + e[i][1] * e[j][1]) / (4.0 * area);
        }
    }
    Ok(k)
}

/// Assembles `C` (lumped) and `G` in triangle order.
pub fn assemble_fem(mesh: &TriangleMesh) -> Result<FemMatrices> {
    let m = mesh.node_count();
    let mut c = vec![0.0; m];
    let mut g = TriMat::with_capacity((m, m), 9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v >= m) {
            return Err(Error::InvalidMesh(format!(
                "triangle {t} references node {bad} but the mesh has {m} nodes"
            )));
        }
        let k = element_stiffness(mesh.triangle_vertices(t)).map_err(|e| match e {
            Error::ZeroAreaTriangle { area, .. } => Error::ZeroAreaTriangle { index: t, area },
            other => other,
        })?;
        let area = mesh.triangle_area(t);
        for i in 0..3 {
            c[tri[i]] += area / 3.0;
            for j in 0..3 {
                g.add_triplet(tri[i], tri[j], k[i][j]);
            }
        }
    }
    Ok(FemMatrices { c, g: g.to_csc() })
}
