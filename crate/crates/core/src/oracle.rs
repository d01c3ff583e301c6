//! Brute-force reference solvers for small instances.
//!
//! Nothing here shares assembly code with [`crate::fem`]: element integrals are computed
//! by Gauss quadrature of the bilinear shape functions, and all operators are dense.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::{PermField, SpectralWeight};
use crate::mesh::{oversample, BoundaryKind, BoundarySpec, StructuredMesh};
use crate::spectral::LocalEigenBasis;

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Values and reference gradients of the four bilinear shape functions at `(s, t)`,
/// nodes ordered (0,0), (1,0), (0,1), (1,1).
fn shape(s: f64, t: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    (
        [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t],
        [
            [-(1.0 - t), -(1.0 - s)],
            [1.0 - t, -s],
            [-t, 1.0 - s],
            [t, s],
        ],
    )
}

fn cell_corners(mesh: &StructuredMesh, c: usize) -> [usize; 4] {
    let (i, j) = mesh.cell_ij(c);
    let w = mesh.nx() + 1;
    [j * w + i, j * w + i + 1, (j + 1) * w + i, (j + 1) * w + i + 1]
}

/// Dense `∫ κ ∇φ_a·∇φ_b` over the whole mesh.
pub fn naive_stiffness(mesh: &StructuredMesh, field: &PermField) -> DMatrix<f64> {
    let n = (mesh.nx() + 1) * (mesh.ny() + 1);
    let (hx, hy) = (1.0 / mesh.nx() as f64, 1.0 / mesh.ny() as f64);
    let mut a = DMatrix::zeros(n, n);
    for c in 0..mesh.nx() * mesh.ny() {
        let nodes = cell_corners(mesh, c);
        let k = field.values()[c];
        for &s in &GAUSS {
            for &t in &GAUSS {
                let (_, g) = shape(s, t);
                let wq = 0.25 * hx * hy;
                for p in 0..4 {
                    for q in 0..4 {
                        let dot = g[p][0] * g[q][0] / (hx * hx) + g[p][1] * g[q][1] / (hy * hy);
                        a[(nodes[p], nodes[q])] += k * wq * dot;
                    }
                }
            }
        }
    }
    a
}

/// Dense `∫ w φ_a φ_b` over the given cells, with a per-cell weight.
pub fn naive_mass(mesh: &StructuredMesh, cells: &[usize], weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let n = (mesh.nx() + 1) * (mesh.ny() + 1);
    let (hx, hy) = (1.0 / mesh.nx() as f64, 1.0 / mesh.ny() as f64);
    let mut m = DMatrix::zeros(n, n);
    for &c in cells {
        let nodes = cell_corners(mesh, c);
        let w = weight(c);
        for &s in &GAUSS {
            for &t in &GAUSS {
                let (v, _) = shape(s, t);
                for p in 0..4 {
                    for q in 0..4 {
                        m[(nodes[p], nodes[q])] += w * 0.25 * hx * hy * v[p] * v[q];
                    }
                }
            }
        }
    }
    m
}

fn edge_length(mesh: &StructuredMesh, a: usize, b: usize) -> f64 {
    let (xa, ya) = mesh.node_coords(a);
    let (xb, yb) = mesh.node_coords(b);
    ((xb - xa).powi(2) + (yb - ya).powi(2)).sqrt()
}

/// Largest eigenvalue estimate of an SPD matrix by power iteration.
fn power_max(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).fract());
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w) / v.dot(&v);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // safety margin: power iteration approaches from below
    1.01 * lambda
}

/// Minimizes `½ uᵀAu − Fᵀu` subject to `u_j ≤ 0` for `j` in `contact`, by accelerated
/// projected gradient with adaptive restart and step `1/λ_max(A)`.
///
/// Stops when the projected gradient has Euclidean norm at most `tol`.
pub fn solve_vi_projected(
    a: &DMatrix<f64>,
    f: &[f64],
    contact: &[usize],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = a.nrows();
    let mut bounded = vec![false; n];
    for &j in contact {
        bounded[j] = true;
    }
    let project = |x: &mut DVector<f64>| {
        for j in 0..n {
            if bounded[j] && x[j] > 0.0 {
                x[j] = 0.0;
            }
        }
    };
    let fv = DVector::from_column_slice(f);
    let step = 1.0 / power_max(a);
    let mut x = DVector::zeros(n);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    for _ in 0..max_iter {
        let g = a * &y - &fv;
        let mut next = &y - &g * step;
        project(&mut next);

        let gx = a * &next - &fv;
        let pg = (0..n)
            .map(|j| {
                if bounded[j] && next[j] == 0.0 {
                    gx[j].max(0.0)
                } else {
                    gx[j]
                }
            })
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if pg <= tol {
            return Ok(next.iter().copied().collect());
        }

        // gradient-based adaptive restart: drop momentum once it points uphill
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            theta = 1.0;
            y = next.clone();
        } else {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            y = &next + (&next - &x) * ((theta - 1.0) / theta_next);
            theta = theta_next;
        }
        x = next;
    }
    Err(Error::Config(format!(
        "projected gradient did not reach tolerance {tol:e} in {max_iter} iterations"
    )))
}

/// The discrete contact variational inequality on a mesh, Dirichlet nodes eliminated.
/// Returns the full nodal vector.
pub fn contact_vi(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    load: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let a = naive_stiffness(mesh, field);
    let keep: Vec<usize> = (0..mesh.num_nodes()).filter(|&n| !spec.is_dirichlet(n)).collect();
    let ar = a.select_rows(&keep).select_columns(&keep);
    let fr: Vec<f64> = keep.iter().map(|&n| load[n]).collect();
    let contact: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter_map(|(k, &n)| spec.is_contact(n).then_some(k))
        .collect();
    let ur = solve_vi_projected(&ar, &fr, &contact, tol, max_iter)?;
    let mut u = vec![0.0; mesh.num_nodes()];
    for (k, &n) in keep.iter().enumerate() {
        u[n] = ur[k];
    }
    Ok(u)
}

/// Reference solution of the local multiscale basis problem for `ψ_i^{j,m}`: the
/// projection `Π` is formed explicitly and the system `(A + C + ΠᵀSΠ) ψ = ΠᵀS φ̂` is
/// solved densely on the free nodes of the oversampled domain.
///
/// Returns `(free global nodes, ψ on those nodes)`.
#[allow(clippy::too_many_arguments)]
pub fn dense_kkt_solve(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    weight: &SpectralWeight,
    eigen: &[LocalEigenBasis],
    element: usize,
    j: usize,
    layers: usize,
    bvals: &[f64],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (free, op, rhs) = dense_local_system(mesh, spec, field, weight, eigen, element, j, layers, bvals)?;
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Config("singular local reference system".into()))?;
    Ok((free, x.iter().copied().collect()))
}

/// The naive local operator and right-hand side used by [`dense_kkt_solve`].
#[allow(clippy::too_many_arguments)]
pub fn dense_local_system(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    weight: &SpectralWeight,
    eigen: &[LocalEigenBasis],
    element: usize,
    j: usize,
    layers: usize,
    bvals: &[f64],
) -> Result<(Vec<usize>, DMatrix<f64>, DVector<f64>)> {
    let domain = oversample(mesh, spec, element, layers)?;
    let box_cells = mesh.box_cells(&domain.cells);
    let free = domain.free_nodes(mesh);
    let nf = free.len();

    // stiffness restricted to the box: integrate over box cells only
    let mut sub_field = vec![0.0; mesh.num_cells()];
    for &c in &box_cells {
        sub_field[c] = field.values()[c];
    }
    let n = mesh.num_nodes();
    let mut a_box = DMatrix::zeros(n, n);
    for &c in &box_cells {
        let nodes = cell_corners(mesh, c);
        let (hx, hy) = (1.0 / mesh.nx() as f64, 1.0 / mesh.ny() as f64);
        for &s in &GAUSS {
            for &t in &GAUSS {
                let (_, g) = shape(s, t);
                for p in 0..4 {
                    for q in 0..4 {
                        let dot = g[p][0] * g[q][0] / (hx * hx) + g[p][1] * g[q][1] / (hy * hy);
                        a_box[(nodes[p], nodes[q])] += sub_field[c] * 0.25 * hx * hy * dot;
                    }
                }
            }
        }
    }
    // contact trace on the box's part of Γ_C
    let in_box = |node: usize| {
        let (i, j) = mesh.node_ij(node);
        domain.cells.contains_node(i, j)
    };
    for e in spec.edges().iter().filter(|e| e.kind == BoundaryKind::Contact) {
        if e.nodes.iter().all(|&v| in_box(v)) {
            let len = edge_length(mesh, e.nodes[0], e.nodes[1]);
            for &v in &e.nodes {
                a_box[(v, v)] += bvals[v] * 0.5 * len;
            }
        }
    }

    let mut op = DMatrix::from_fn(nf, nf, |r, c| a_box[(free[r], free[c])]);
    let mut rhs = DVector::zeros(nf);
    for k in domain.coarse_elements(mesh) {
        let basis = &eigen[k];
        let cells_k = mesh.box_cells(&mesh.coarse_cells(k));
        let s_full = naive_mass(mesh, &cells_k, |c| weight.value(c));
        let nk = basis.nodes.len();
        let s_k = DMatrix::from_fn(nk, nk, |r, c| s_full[(basis.nodes[r], basis.nodes[c])]);
        // R_k: free vector -> values on K_k's nodes
        let mut r_k = DMatrix::zeros(nk, nf);
        for (a, &node) in basis.nodes.iter().enumerate() {
            if let Some(b) = free.iter().position(|&f| f == node) {
                r_k[(a, b)] = 1.0;
            }
        }
        let phi = &basis.vectors;
        let pi_k = phi * (phi.transpose() * &s_k * &r_k);
        op += pi_k.transpose() * &s_k * &pi_k;
        if k == element {
            let phi_j = phi.column(j).into_owned();
            rhs += pi_k.transpose() * (&s_k * phi_j);
        }
    }
    Ok((free, op, rhs))
}
