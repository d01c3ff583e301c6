//! Bilinear (Q1) assembly on the fine grid.
//!
//! Permeability and spectral weight are constant per fine cell, so element matrices
//! are exact scalings of the reference rectangle matrices.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::{PermField, SpectralWeight};
use crate::mesh::{BoundaryEdge, BoundaryKind, BoundarySpec, CellBox, StructuredMesh};
use crate::sparse::SparseMatrix;

pub type ElementMatrix = [[f64; 4]; 4];

const MASS_1D: [[f64; 2]; 2] = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
const STIFF_1D: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 1.0]];

/// Q1 Laplacian stiffness on an `hx × hy` rectangle, local node order `(0,0), (1,0), (0,1), (1,1)`.
pub fn element_stiffness(hx: f64, hy: f64) -> ElementMatrix {
    let mut k = [[0.0; 4]; 4];
    for (r, row) in k.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (ax, ay, bx, by) = (r % 2, r / 2, c % 2, c / 2);
            *v = hy / hx * STIFF_1D[ax][bx] * MASS_1D[ay][by]
                + hx / hy * MASS_1D[ax][bx] * STIFF_1D[ay][by];
        }
    }
    k
}

/// Consistent Q1 mass on an `hx × hy` rectangle.
pub fn element_mass(hx: f64, hy: f64) -> ElementMatrix {
    let mut m = [[0.0; 4]; 4];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = hx * hy * MASS_1D[r % 2][c % 2] * MASS_1D[r / 2][c / 2];
        }
    }
    m
}

/// Assembles `Σ_τ coeff(τ) E` over the cells of `cells`, numbered by the box's local
/// row-major node order. For `mesh.whole()` that order is the global one.
pub fn assemble_on_box(
    mesh: &StructuredMesh,
    cells: &CellBox,
    coeff: impl Fn(usize) -> f64,
    elem: &ElementMatrix,
) -> SparseMatrix {
    let n = cells.num_nodes();
    let mut t = Vec::with_capacity(16 * cells.num_cells());
    let cols = cells.node_cols();
    for j in cells.j0..cells.j1 {
        for i in cells.i0..cells.i1 {
            let w = coeff(mesh.cell(i, j));
            if w == 0.0 {
                continue;
            }
            let base = (j - cells.j0) * cols + (i - cells.i0);
            let local = [base, base + 1, base + cols, base + cols + 1];
            for a in 0..4 {
                for b in 0..4 {
                    t.push((local[a], local[b], w * elem[a][b]));
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, t)
}

/// Global stiffness `a(u, v) = ∫ κ ∇u·∇v`, before any boundary treatment.
pub fn assemble_stiffness(mesh: &StructuredMesh, field: &PermField) -> SparseMatrix {
    let elem = element_stiffness(mesh.hx(), mesh.hy());
    assemble_on_box(mesh, &mesh.whole(), |c| field.value(c), &elem)
}

/// Unweighted consistent mass on the whole mesh (the discrete L² inner product).
pub fn assemble_mass(mesh: &StructuredMesh) -> SparseMatrix {
    let elem = element_mass(mesh.hx(), mesh.hy());
    assemble_on_box(mesh, &mesh.whole(), |_| 1.0, &elem)
}

/// `s(u, v) = ∫ κ̃ u v` restricted to the given cells, in global numbering.
pub fn assemble_weighted_mass(
    mesh: &StructuredMesh,
    weight: &SpectralWeight,
    cells: &[usize],
) -> SparseMatrix {
    let elem = element_mass(mesh.hx(), mesh.hy());
    let mut t = Vec::with_capacity(16 * cells.len());
    for &c in cells {
        let nodes = mesh.cell_nodes(c);
        let w = weight.value(c);
        for a in 0..4 {
            for b in 0..4 {
                t.push((nodes[a], nodes[b], w * elem[a][b]));
            }
        }
    }
    SparseMatrix::from_triplets(mesh.num_nodes(), t)
}

/// Lumped trace weights: each contact edge in `edges` gives half its length to each endpoint.
pub fn contact_weights<'a>(
    mesh: &StructuredMesh,
    edges: impl IntoIterator<Item = &'a BoundaryEdge>,
) -> Vec<f64> {
    let mut w = vec![0.0; mesh.num_nodes()];
    for e in edges.into_iter().filter(|e| e.kind == BoundaryKind::Contact) {
        for n in e.nodes {
            w[n] += 0.5 * e.length;
        }
    }
    w
}

/// Lumped contact trace operator `∫_{Γ_C} b u v dσ` over the given contact edges.
///
/// `bvals` is indexed by global node; only nodes touched by the edges are read.
pub fn assemble_contact_trace<'a>(
    mesh: &StructuredMesh,
    bvals: &[f64],
    edges: impl IntoIterator<Item = &'a BoundaryEdge>,
) -> Result<SparseMatrix> {
    let w = contact_weights(mesh, edges);
    let mut d = vec![0.0; mesh.num_nodes()];
    for (n, (&wn, dn)) in w.iter().zip(d.iter_mut()).enumerate() {
        if wn > 0.0 {
            let b = bvals[n];
            if b < 0.0 {
                return Err(Error::NegativeCoefficient { node: n, value: b });
            }
            *dn = b * wn;
        }
    }
    Ok(SparseMatrix::diagonal(&d))
}

/// Source term `f`.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Zero,
    Constant(f64),
    /// `-2x + 3y + sin(2πx) sin(2πy)`.
    F1,
    /// `10` on the cross `3/8 < y < 5/8` or `3/8 < x < 5/8`, `-10` elsewhere.
    F2,
    /// `10` on the strip `1/2 < y < 3/4`, `-10` elsewhere.
    F3,
    /// One value per fine cell, row-major.
    CellTable(Vec<f64>),
}

impl Source {
    /// Pointwise value; `CellTable` has no pointwise meaning and returns `None`.
    pub fn eval(&self, x: f64, y: f64) -> Option<f64> {
        Some(match self {
            Source::Zero => 0.0,
            Source::Constant(c) => *c,
            Source::F1 => -2.0 * x + 3.0 * y + (2.0 * PI * x).sin() * (2.0 * PI * y).sin(),
            Source::F2 => {
                let band = |t: f64| t > 3.0 / 8.0 && t < 5.0 / 8.0;
                if band(x) || band(y) {
                    10.0
                } else {
                    -10.0
                }
            }
            Source::F3 => {
                if y > 0.5 && y < 0.75 {
                    10.0
                } else {
                    -10.0
                }
            }
            Source::CellTable(_) => return None,
        })
    }

    /// Smooth sources use Gauss quadrature, the rest are read at cell centers.
    fn is_smooth(&self) -> bool {
        matches!(self, Source::F1)
    }
}

/// `∫_Ω f v` for every fine node.
pub fn assemble_load(mesh: &StructuredMesh, source: &Source) -> Vec<f64> {
    let mut b = vec![0.0; mesh.num_nodes()];
    let (hx, hy) = (mesh.hx(), mesh.hy());
    let area = hx * hy;
    let g = 0.5 / 3f64.sqrt();
    let gauss = [0.5 - g, 0.5 + g];
    for c in 0..mesh.num_cells() {
        let nodes = mesh.cell_nodes(c);
        if source.is_smooth() {
            let (i, j) = mesh.cell_ij(c);
            for &s in &gauss {
                for &t in &gauss {
                    let x = (i as f64 + s) * hx;
                    let y = (j as f64 + t) * hy;
                    let f = source.eval(x, y).unwrap_or(0.0);
                    let shape = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                    for a in 0..4 {
                        b[nodes[a]] += 0.25 * area * f * shape[a];
                    }
                }
            }
        } else {
            let f = match source {
                Source::CellTable(v) => v[c],
                _ => {
                    let (x, y) = mesh.cell_center(c);
                    source.eval(x, y).unwrap_or(0.0)
                }
            };
            if f != 0.0 {
                for n in nodes {
                    b[n] += 0.25 * area * f;
                }
            }
        }
    }
    b
}

/// Neumann datum `p` on `Γ_N`.
#[derive(Clone, Debug)]
pub enum NeumannData {
    Zero,
    Constant(f64),
    /// One value per Neumann edge, in the order of `BoundarySpec::edges_of(Neumann)`.
    PerEdge(Vec<f64>),
    Function(fn(f64, f64) -> f64),
}

impl NeumannData {
    pub fn is_zero(&self) -> bool {
        match self {
            NeumannData::Zero => true,
            NeumannData::Constant(c) => *c == 0.0,
            NeumannData::PerEdge(v) => v.iter().all(|&x| x == 0.0),
            NeumannData::Function(_) => false,
        }
    }
}

/// `∫_{Γ_N} p v dσ` with two-point Gauss on each Neumann edge accepted by `keep`.
pub fn assemble_neumann_load(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    p: &NeumannData,
    keep: impl Fn(&BoundaryEdge) -> bool,
) -> Vec<f64> {
    let mut b = vec![0.0; mesh.num_nodes()];
    if p.is_zero() {
        return b;
    }
    let g = 0.5 / 3f64.sqrt();
    for (k, e) in spec.edges_of(BoundaryKind::Neumann).enumerate() {
        if !keep(e) {
            continue;
        }
        let (xa, ya) = mesh.node_coords(e.nodes[0]);
        let (xb, yb) = mesh.node_coords(e.nodes[1]);
        for s in [0.5 - g, 0.5 + g] {
            let value = match p {
                NeumannData::Zero => 0.0,
                NeumannData::Constant(c) => *c,
                NeumannData::PerEdge(v) => v[k],
                NeumannData::Function(f) => f(xa + s * (xb - xa), ya + s * (yb - ya)),
            };
            b[e.nodes[0]] += 0.5 * e.length * value * (1.0 - s);
            b[e.nodes[1]] += 0.5 * e.length * value * s;
        }
    }
    b
}

/// Symmetric elimination: constrained rows and columns are zeroed, the diagonal set to 1
/// and the right-hand side to 0.
pub fn apply_dirichlet(op: &SparseMatrix, rhs: &[f64], fixed: &[bool]) -> (SparseMatrix, Vec<f64>) {
    let n = op.order();
    let mut t = Vec::with_capacity(op.nnz());
    for r in 0..n {
        if fixed[r] {
            t.push((r, r, 1.0));
            continue;
        }
        t.extend(op.row(r).filter(|(c, _)| !fixed[*c]).map(|(c, v)| (r, c, v)));
    }
    let b = rhs
        .iter()
        .zip(fixed)
        .map(|(&v, &f)| if f { 0.0 } else { v })
        .collect();
    (SparseMatrix::from_triplets(n, t), b)
}
