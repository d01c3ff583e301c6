//! Local generalized eigenproblems `(A_i + C_i(b)) φ = λ S_i φ` on each coarse element,
//! with natural boundary conditions on `∂K_i`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fem::{assemble_on_box, contact_weights, element_mass, element_stiffness};
use crate::field::{PermField, SpectralWeight};
use crate::mesh::{BoundaryEdge, BoundaryKind, BoundarySpec, CellBox, StructuredMesh};

/// The first `l` eigenpairs of one coarse element, eigenvectors `s_i`-orthonormal.
#[derive(Clone, Debug)]
pub struct LocalEigenBasis {
    pub element: usize,
    /// Global ids of the element's fine nodes, local row-major order.
    pub nodes: Vec<usize>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `nodes.len() × l`, column `j` is `φ_i^j`.
    pub vectors: DMatrix<f64>,
    /// `S_i Φ_i`, the columns used by the projection `π_i`.
    pub s_vectors: DMatrix<f64>,
    /// `λ_{l+1} - λ_l`, or `None` when all local modes are kept.
    pub gap: Option<f64>,
}

impl LocalEigenBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Contact edges lying on `∂K ∩ Γ_C` for the closed cell box `cells`.
pub fn box_contact_edges(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    cells: &CellBox,
) -> Vec<BoundaryEdge> {
    spec.edges_of(BoundaryKind::Contact)
        .filter(|e| {
            e.nodes.iter().all(|&n| {
                let (i, j) = mesh.node_ij(n);
                cells.contains_node(i, j)
            })
        })
        .copied()
        .collect()
}

/// Dense local operators `(A_i + C_i(b), S_i)` in the element's local node order.
pub fn local_operators(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    weight: &SpectralWeight,
    element: usize,
    bvals: &[f64],
) -> Result<(Vec<usize>, DMatrix<f64>, DMatrix<f64>)> {
    let cells = mesh.coarse_cells(element);
    let nodes = mesh.box_nodes(&cells);
    let stiff = element_stiffness(mesh.hx(), mesh.hy());
    let mass = element_mass(mesh.hx(), mesh.hy());
    let mut a = assemble_on_box(mesh, &cells, |c| field.value(c), &stiff).to_dense();
    let s = assemble_on_box(mesh, &cells, |c| weight.value(c), &mass).to_dense();
    let edges = box_contact_edges(mesh, spec, &cells);
    if !edges.is_empty() {
        let w = contact_weights(mesh, &edges);
        for (k, &n) in nodes.iter().enumerate() {
            if w[n] > 0.0 {
                if bvals[n] < 0.0 {
                    return Err(Error::NegativeCoefficient {
                        node: n,
                        value: bvals[n],
                    });
                }
                a[(k, k)] += bvals[n] * w[n];
            }
        }
    }
    Ok((nodes, a, s))
}

/// Symmetric-definite generalized eigensolve via `S = L Lᵀ`; returns all pairs ascending,
/// ties kept in solver index order.
pub fn generalized_eigen(a: &DMatrix<f64>, s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let chol = s
        .clone()
        .cholesky()
        .expect("weighted mass must be positive definite");
    let l = chol.l();
    // M = L⁻¹ A L⁻ᵀ
    let y = l.solve_lower_triangular(a).expect("triangular solve");
    let m = l
        .solve_lower_triangular(&y.transpose())
        .expect("triangular solve");
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let ys = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let phi = l
        .transpose()
        .solve_upper_triangular(&ys)
        .expect("triangular solve");
    (values, phi)
}

/// Flips each column so that its entry of largest magnitude is positive.
fn normalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0usize;
        for k in 0..col.len() {
            if col[k].abs() > col[best].abs() {
                best = k;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

pub fn solve_local_spectral(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    weight: &SpectralWeight,
    element: usize,
    bvals: &[f64],
    l: usize,
) -> Result<LocalEigenBasis> {
    let (nodes, a, s) = local_operators(mesh, spec, field, weight, element, bvals)?;
    if l == 0 || l > nodes.len() {
        return Err(Error::Config(format!(
            "number of eigenpairs must be in 1..={}, got {l}",
            nodes.len()
        )));
    }
    let (values, phi) = generalized_eigen(&a, &s);
    let mut vectors = phi.columns(0, l).into_owned();
    normalize_signs(&mut vectors);
    let gap = (l < values.len()).then(|| values[l] - values[l - 1]);
    if let Some(g) = gap {
        if g < 1e-8 * values[l].abs().max(1.0) {
            log::debug!("element {element}: eigenvalue cluster at cut l={l} (gap {g:e})");
        }
    }
    let s_vectors = &s * &vectors;
    Ok(LocalEigenBasis {
        element,
        nodes,
        eigenvalues: values[..l].to_vec(),
        vectors,
        s_vectors,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{spectral_weight, synth_medium, MediumKind, WeightMode};
    use crate::mesh::{build_mesh, Geometry};

    #[test]
    fn interior_element_has_zero_first_eigenvalue() {
        let (mesh, spec) = build_mesh(32, 4, Geometry::AllContact).unwrap();
        let field = synth_medium(MediumKind::MixedC, 9, 1e3, &mesh).unwrap();
        let w = spectral_weight(&field, &mesh, WeightMode::Simplified);
        let b = vec![1e4; mesh.num_nodes()];
        let e = mesh.coarse(1, 2);
        let basis = solve_local_spectral(&mesh, &spec, &field, &w, e, &b, 4).unwrap();
        assert!(basis.eigenvalues[0].abs() < 1e-10);
        let v = basis.vectors.column(0);
        let mean = v.mean();
        assert!(v.iter().all(|x| ((x - mean) / mean).abs() < 1e-8));
        assert!(basis.eigenvalues.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn full_basis_is_s_orthonormal() {
        let (mesh, spec) = build_mesh(12, 3, Geometry::MixedDnc).unwrap();
        let field = synth_medium(MediumKind::Inclusions, 2, 10.0, &mesh).unwrap();
        let w = spectral_weight(&field, &mesh, WeightMode::Simplified);
        let b = vec![3.0; mesh.num_nodes()];
        let e = mesh.coarse(1, 0);
        let (_, _, s) = local_operators(&mesh, &spec, &field, &w, e, &b).unwrap();
        let dim = 25;
        let basis = solve_local_spectral(&mesh, &spec, &field, &w, e, &b, dim).unwrap();
        let g = basis.vectors.transpose() * &s * &basis.vectors;
        let err = (g - DMatrix::identity(dim, dim)).amax();
        assert!(err < 1e-10, "orthonormality error {err}");
        // contact trace present on this element: constants are no longer in the kernel
        assert!(basis.eigenvalues[0] > 0.0);
        assert!(basis.gap.is_none());
    }

    #[test]
    fn too_many_pairs_rejected() {
        let (mesh, spec) = build_mesh(8, 4, Geometry::MixedDnc).unwrap();
        let field = PermField::constant(&mesh, 1.0);
        let w = spectral_weight(&field, &mesh, WeightMode::Simplified);
        let b = vec![0.0; mesh.num_nodes()];
        assert!(solve_local_spectral(&mesh, &spec, &field, &w, 0, &b, 10).is_err());
        assert!(solve_local_spectral(&mesh, &spec, &field, &w, 0, &b, 0).is_err());
    }
}
