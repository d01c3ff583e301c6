//! Constraint energy minimizing multiscale space and the one-step multiscale solve.
//!
//! For a Robin coefficient `b` on the contact boundary, every coarse element `K_i`
//! contributes `l` basis functions `ψ_i^{j,m}` obtained from a local problem on the
//! oversampled domain `K_i^m`:
//!
//! ```text
//! ã(ψ, v; b) + s(πψ, πv) = s(φ_i^j, πv)      for all v in V(K_i^m)
//! ```
//!
//! The projection term is `Σ_k (S_k Φ_k)(S_k Φ_k)ᵀ` over the coarse elements inside
//! `K_i^m`, a low-rank update of the sparse local stiffness. Local systems are solved
//! with a skyline Cholesky factorization of the stiffness part and the Woodbury identity
//! for the low-rank part.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{
    apply_dirichlet, assemble_neumann_load, assemble_on_box, contact_weights, element_stiffness,
    NeumannData,
};
use crate::field::{PermField, SpectralWeight};
use crate::linsolve::{Cholesky, SolveError};
use crate::mesh::{oversample, BoundarySpec, CellBox, OversampleDomain, StructuredMesh};
use crate::sparse::{SparseMatrix, SparseVec};
use crate::spectral::{box_contact_edges, solve_local_spectral, LocalEigenBasis};

/// Above this order the coarse system is factored in skyline form instead of densely.
const DENSE_COARSE_LIMIT: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CemConfig {
    /// Oversampling layers `m`.
    pub layers: usize,
    /// Eigenfunctions per coarse element `l_m`.
    pub n_eigen: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            n_eigen: 3,
        }
    }
}

/// A function stored element by element: entry `i` holds values on the nodes of `K_i`.
/// Functions in the auxiliary space are discontinuous across coarse element boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct BrokenField(pub Vec<Vec<f64>>);

impl BrokenField {
    pub fn max_abs_diff(&self, other: &BrokenField) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// `π v` for a continuous fine vector `v`.
pub fn project_aux(eigen: &[LocalEigenBasis], v: &[f64]) -> BrokenField {
    let broken = BrokenField(
        eigen
            .iter()
            .map(|e| e.nodes.iter().map(|&n| v[n]).collect())
            .collect(),
    );
    project_broken(eigen, &broken)
}

/// `π v` for an element-wise vector.
pub fn project_broken(eigen: &[LocalEigenBasis], v: &BrokenField) -> BrokenField {
    BrokenField(
        eigen
            .iter()
            .zip(&v.0)
            .map(|(e, vi)| {
                let vi = DVector::from_column_slice(vi);
                let coeff = e.s_vectors.transpose() * vi;
                (&e.vectors * coeff).iter().copied().collect()
            })
            .collect(),
    )
}

/// Nodes whose Robin coefficient a cached object depends on.
#[derive(Clone, Debug)]
struct ElementLayout {
    domain: OversampleDomain,
    /// Contact nodes on `∂K_i ∩ Γ_C` (eigenproblem dependence).
    eigen_nodes: Vec<usize>,
    /// Contact nodes in the closure of `K_i^m` (basis and corrector dependence).
    domain_nodes: Vec<usize>,
}

fn contact_nodes_of(mesh: &StructuredMesh, spec: &BoundarySpec, cells: &CellBox) -> Vec<usize> {
    let mut nodes: Vec<usize> = box_contact_edges(mesh, spec, cells)
        .iter()
        .flat_map(|e| e.nodes)
        .filter(|&n| spec.is_contact(n))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

fn key(nodes: &[usize], bvals: &[f64]) -> Vec<u64> {
    nodes.iter().map(|&n| bvals[n].to_bits()).collect()
}

/// Factored local operator on the free nodes of one oversampled domain.
pub struct LocalSolver {
    /// Global ids of the free nodes, ascending.
    free: Vec<usize>,
    /// Stiffness plus trace on the free nodes (unpinned).
    stiffness: SparseMatrix,
    chol: Cholesky,
    /// Low-rank columns `W` as (free index, value) lists; `signs` is the diagonal of `Σ`.
    cols: Vec<(Vec<usize>, Vec<f64>)>,
    signs: Vec<f64>,
    /// `B̂⁻¹ W`, row-major `free.len() × cols.len()`.
    y: Vec<f64>,
    cap: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// Position in `cols` of the columns `S_i Φ_i` of the centre element.
    own_cols: std::ops::Range<usize>,
}

impl LocalSolver {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: &StructuredMesh,
        spec: &BoundarySpec,
        field: &PermField,
        domain: &OversampleDomain,
        eigen: &[LocalEigenBasis],
        bvals: &[f64],
    ) -> Result<Self> {
        let cells = domain.cells;
        let box_n = cells.num_nodes();
        let stiff = element_stiffness(mesh.hx(), mesh.hy());
        let a = assemble_on_box(mesh, &cells, |c| field.value(c), &stiff);

        let box_nodes = mesh.box_nodes(&cells);
        let edges = box_contact_edges(mesh, spec, &cells);
        let w = contact_weights(mesh, &edges);
        let mut trace = vec![0.0; box_n];
        let mut any_trace = false;
        for (k, &n) in box_nodes.iter().enumerate() {
            if w[n] > 0.0 {
                if bvals[n] < 0.0 {
                    return Err(Error::NegativeCoefficient {
                        node: n,
                        value: bvals[n],
                    });
                }
                trace[k] = bvals[n] * w[n];
                any_trace |= trace[k] > 0.0 && !domain.is_constrained_local(k);
            }
        }
        let a = a.add_diagonal(&trace);

        let free_local: Vec<usize> = (0..box_n).filter(|&k| !domain.is_constrained_local(k)).collect();
        let free: Vec<usize> = free_local.iter().map(|&k| box_nodes[k]).collect();
        let stiffness = a.submatrix(&free_local);
        let nf = free.len();

        // box-local index -> free index
        let mut to_free = vec![usize::MAX; box_n];
        for (f, &k) in free_local.iter().enumerate() {
            to_free[k] = f;
        }

        let mut cols = Vec::new();
        let mut signs = Vec::new();
        let mut own_cols = 0..0;
        for e in domain.coarse_elements(mesh) {
            let basis = &eigen[e];
            let start = cols.len();
            for j in 0..basis.len() {
                let mut idx = Vec::with_capacity(basis.nodes.len());
                let mut val = Vec::with_capacity(basis.nodes.len());
                for (k, &n) in basis.nodes.iter().enumerate() {
                    let (i, jj) = mesh.node_ij(n);
                    let local = cells.local_node(i, jj).expect("element inside its oversampled domain");
                    let f = to_free[local];
                    if f != usize::MAX {
                        idx.push(f);
                        val.push(basis.s_vectors[(k, j)]);
                    }
                }
                cols.push((idx, val));
                signs.push(1.0);
            }
            if e == domain.element {
                own_cols = start..cols.len();
            }
        }

        // Pure Neumann local problem: pin one node and undo the pin through the update.
        let floating = !any_trace && nf == box_n;
        let factor_target = if floating {
            let mut d = vec![0.0; nf];
            let pin_weight = stiffness.get(0, 0).max(f64::MIN_POSITIVE);
            d[0] = pin_weight;
            cols.push((vec![0], vec![pin_weight.sqrt()]));
            signs.push(-1.0);
            stiffness.add_diagonal(&d)
        } else {
            stiffness.clone()
        };
        let chol = Cholesky::factor(&factor_target)?;

        let r = cols.len();
        let mut y = vec![0.0; nf * r];
        for (c, (idx, val)) in cols.iter().enumerate() {
            for (&i, &v) in idx.iter().zip(val) {
                y[i * r + c] = v;
            }
        }
        chol.solve_many_in_place(&mut y, r);

        let mut cap = DMatrix::from_diagonal(&DVector::from_vec(signs.clone()));
        for (c, (idx, val)) in cols.iter().enumerate() {
            for (&i, &v) in idx.iter().zip(val) {
                let row = &y[i * r..(i + 1) * r];
                for d in 0..r {
                    cap[(c, d)] += v * row[d];
                }
            }
        }
        let cap = cap.lu();
        if !cap.is_invertible() {
            return Err(SolveError::Singular.into());
        }
        Ok(Self {
            free,
            stiffness,
            chol,
            cols,
            signs,
            y,
            cap,
            own_cols,
        })
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Applies the local operator `B + Σ_k U_k U_kᵀ` to a free-node vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.mul_vec(x);
        let n_low = self.own_low_rank_count();
        for (idx, val) in &self.cols[..n_low] {
            let t: f64 = idx.iter().zip(val).map(|(&i, &v)| v * x[i]).sum();
            for (&i, &v) in idx.iter().zip(val) {
                out[i] += v * t;
            }
        }
        out
    }

    fn own_low_rank_count(&self) -> usize {
        self.signs.iter().filter(|&&s| s > 0.0).count()
    }

    fn woodbury(&self, rhs: &[f64]) -> Vec<f64> {
        let r = self.cols.len();
        let mut z = self.chol.solve(rhs);
        let wz: Vec<f64> = self
            .cols
            .iter()
            .map(|(idx, val)| idx.iter().zip(val).map(|(&i, &v)| v * z[i]).sum())
            .collect();
        let t = self
            .cap
            .solve(&DVector::from_vec(wz))
            .expect("capacitance matrix checked invertible");
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.y[i * r..(i + 1) * r];
            *zi -= row.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        z
    }

    /// Solves the local system for a right-hand side on the free nodes, with one step
    /// of iterative refinement against the unfactored operator.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.woodbury(rhs);
        let ax = self.apply(&x);
        let res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.woodbury(&res);
        x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
        x
    }

    /// Right-hand side `S_i φ_i^j` of basis function `j` on the free nodes.
    pub fn basis_rhs(&self, j: usize) -> Vec<f64> {
        let mut rhs = vec![0.0; self.free.len()];
        let (idx, val) = &self.cols[self.own_cols.start + j];
        for (&i, &v) in idx.iter().zip(val) {
            rhs[i] = v;
        }
        rhs
    }

    pub fn to_global(&self, local: &[f64]) -> SparseVec {
        SparseVec::from_dense_on(self.free.clone(), local)
    }
}

/// Right-hand side `∫_{∂K_i ∩ Γ_N} p v dσ` as a global vector.
pub fn corrector_load(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    element: usize,
    p: &NeumannData,
) -> Vec<f64> {
    let cells = mesh.coarse_cells(element);
    assemble_neumann_load(mesh, spec, p, |e| {
        e.nodes.iter().all(|&n| {
            let (i, j) = mesh.node_ij(n);
            cells.contains_node(i, j)
        })
    })
}

/// Builds every eigenbasis for the coefficient `bvals`.
pub fn build_eigenbases(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    weight: &SpectralWeight,
    bvals: &[f64],
    l: usize,
) -> Result<Vec<LocalEigenBasis>> {
    (0..mesh.num_coarse())
        .map(|e| solve_local_spectral(mesh, spec, field, weight, e, bvals, l))
        .collect()
}

/// `ψ_i^{j,m}` as a global sparse vector.
#[allow(clippy::too_many_arguments)]
pub fn build_basis(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    eigen: &[LocalEigenBasis],
    element: usize,
    j: usize,
    layers: usize,
    bvals: &[f64],
) -> Result<SparseVec> {
    let domain = oversample(mesh, spec, element, layers)?;
    let solver = LocalSolver::new(mesh, spec, field, &domain, eigen, bvals)?;
    Ok(solver.to_global(&solver.solve(&solver.basis_rhs(j))))
}

/// `N_i^m p` as a global sparse vector.
#[allow(clippy::too_many_arguments)]
pub fn build_corrector(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    field: &PermField,
    eigen: &[LocalEigenBasis],
    element: usize,
    layers: usize,
    p: &NeumannData,
    bvals: &[f64],
) -> Result<SparseVec> {
    let load = corrector_load(mesh, spec, element, p);
    let domain = oversample(mesh, spec, element, layers)?;
    if load.iter().all(|&v| v == 0.0) {
        return Ok(SparseVec::from_dense_on(Vec::new(), &[]));
    }
    let solver = LocalSolver::new(mesh, spec, field, &domain, eigen, bvals)?;
    let rhs: Vec<f64> = solver.free_nodes().iter().map(|&n| load[n]).collect();
    Ok(solver.to_global(&solver.solve(&rhs)))
}

/// Basis functions, correctors, and the fingerprints they were built with.
#[derive(Clone, Debug)]
pub struct MultiscaleSpace {
    pub config: CemConfig,
    pub eigen: Vec<LocalEigenBasis>,
    /// `basis[i][j]` is `ψ_i^{j,m}`.
    pub basis: Vec<Vec<SparseVec>>,
    /// `N_i^m p` per element (empty when the corrector vanishes).
    pub correctors: Vec<SparseVec>,
    layouts: Vec<ElementLayout>,
    eigen_keys: Vec<Vec<u64>>,
    basis_keys: Vec<Vec<u64>>,
}

impl MultiscaleSpace {
    pub fn dim(&self) -> usize {
        self.basis.iter().map(Vec::len).sum()
    }

    pub fn domain(&self, element: usize) -> &OversampleDomain {
        &self.layouts[element].domain
    }

    /// `N^m p = Σ_i N_i^m p`.
    pub fn corrector_sum(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for c in &self.correctors {
            c.add_to(1.0, &mut out);
        }
        out
    }
}

impl MultiscaleSpace {
    /// Writes `psi_{i}_{j}.bin` per basis function into `dir`: a little-endian `u64`
    /// support size, the `u64` node ids, then the `f64` values.
    pub fn write_basis_dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, funcs) in self.basis.iter().enumerate() {
            for (j, psi) in funcs.iter().enumerate() {
                let mut w = BufWriter::new(File::create(dir.join(format!("psi_{i}_{j}.bin")))?);
                w.write_all(&(psi.idx.len() as u64).to_le_bytes())?;
                for &n in &psi.idx {
                    w.write_all(&(n as u64).to_le_bytes())?;
                }
                for &v in &psi.val {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

/// Reads one file written by [`MultiscaleSpace::write_basis_dump`].
pub fn read_basis_dump(path: &Path) -> Result<SparseVec> {
    let bytes = std::fs::read(path)?;
    let word = |k: usize| -> Result<[u8; 8]> {
        bytes
            .get(8 * k..8 * k + 8)
            .map(|b| b.try_into().expect("8-byte slice"))
            .ok_or_else(|| Error::Parse(format!("{}: truncated basis dump", path.display())))
    };
    let n = u64::from_le_bytes(word(0)?) as usize;
    if bytes.len() != 8 * (1 + 2 * n) {
        return Err(Error::Parse(format!("{}: expected {} bytes", path.display(), 8 * (1 + 2 * n))));
    }
    let idx = (0..n).map(|k| word(1 + k).map(|b| u64::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
    let val = (0..n).map(|k| word(1 + n + k).map(f64::from_le_bytes)).collect::<Result<_>>()?;
    Ok(SparseVec { idx, val })
}

/// Elements whose basis functions see a changed coefficient in their oversampled domain.
pub fn refresh_policy(space: &MultiscaleSpace, bvals: &[f64]) -> Vec<usize> {
    space
        .layouts
        .iter()
        .zip(&space.basis_keys)
        .enumerate()
        .filter_map(|(i, (layout, old))| (key(&layout.domain_nodes, bvals) != *old).then_some(i))
        .collect()
}

/// Output of one call of the multiscale solver.
#[derive(Clone, Debug)]
pub struct CemStep {
    pub u: Vec<f64>,
    /// Elements whose basis was (re)built in this call.
    pub rebuilt: Vec<usize>,
    pub coarse_dim: usize,
}

/// The multiscale solver `S{b, κ, f, p}` with basis caching across calls.
pub struct CemSolver<'a> {
    mesh: &'a StructuredMesh,
    spec: &'a BoundarySpec,
    field: &'a PermField,
    weight: &'a SpectralWeight,
    config: CemConfig,
    neumann: NeumannData,
    stiffness: &'a SparseMatrix,
    load: &'a [f64],
    trace_weights: Vec<f64>,
    nodal_area: Vec<f64>,
    space: Option<MultiscaleSpace>,
    /// Elements whose oversampled cell boxes overlap, per element.
    neighbours: Vec<Vec<usize>>,
}

impl<'a> CemSolver<'a> {
    /// `load` is the full fine load `∫ f v + ∫_{Γ_N} p v`; `p` is needed separately
    /// for the correctors.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: &'a StructuredMesh,
        spec: &'a BoundarySpec,
        field: &'a PermField,
        weight: &'a SpectralWeight,
        config: CemConfig,
        stiffness: &'a SparseMatrix,
        load: &'a [f64],
        neumann: NeumannData,
        nodal_area: Vec<f64>,
    ) -> Result<Self> {
        let per_element = mesh.ratio_x().saturating_add(1) * (mesh.ratio_y() + 1);
        if config.n_eigen == 0 || config.n_eigen > per_element {
            return Err(Error::Config(format!(
                "eigenfunctions per element must be in 1..={per_element}, got {}",
                config.n_eigen
            )));
        }
        let mut boxes = Vec::with_capacity(mesh.num_coarse());
        for e in 0..mesh.num_coarse() {
            boxes.push(oversample(mesh, spec, e, config.layers)?.cells);
        }
        let neighbours = boxes
            .iter()
            .map(|b| {
                boxes
                    .iter()
                    .enumerate()
                    .filter_map(|(k, o)| b.intersects(o).then_some(k))
                    .collect()
            })
            .collect();
        Ok(Self {
            mesh,
            spec,
            field,
            weight,
            config,
            neumann,
            stiffness,
            load,
            trace_weights: contact_weights(mesh, spec.edges()),
            nodal_area,
            space: None,
            neighbours,
        })
    }

    pub fn space(&self) -> Option<&MultiscaleSpace> {
        self.space.as_ref()
    }

    fn layouts(&self) -> Result<Vec<ElementLayout>> {
        (0..self.mesh.num_coarse())
            .map(|e| {
                let domain = oversample(self.mesh, self.spec, e, self.config.layers)?;
                Ok(ElementLayout {
                    eigen_nodes: contact_nodes_of(self.mesh, self.spec, &self.mesh.coarse_cells(e)),
                    domain_nodes: contact_nodes_of(self.mesh, self.spec, &domain.cells),
                    domain,
                })
            })
            .collect()
    }

    fn rebuild_element(
        &self,
        space: &MultiscaleSpace,
        e: usize,
        bvals: &[f64],
    ) -> Result<(Vec<SparseVec>, SparseVec)> {
        let domain = &space.layouts[e].domain;
        let solver = LocalSolver::new(self.mesh, self.spec, self.field, domain, &space.eigen, bvals)?;
        let basis = (0..space.eigen[e].len())
            .map(|j| solver.to_global(&solver.solve(&solver.basis_rhs(j))))
            .collect();
        let load = corrector_load(self.mesh, self.spec, e, &self.neumann);
        let corrector = if load.iter().all(|&v| v == 0.0) {
            SparseVec::default()
        } else {
            let rhs: Vec<f64> = solver.free_nodes().iter().map(|&n| load[n]).collect();
            solver.to_global(&solver.solve(&rhs))
        };
        Ok((basis, corrector))
    }

    /// Brings the cached space up to date with `bvals`; returns the rebuilt elements.
    pub fn update_space(&mut self, bvals: &[f64]) -> Result<Vec<usize>> {
        let n_el = self.mesh.num_coarse();
        let mut space = match self.space.take() {
            Some(s) => s,
            None => {
                let layouts = self.layouts()?;
                MultiscaleSpace {
                    config: self.config,
                    eigen: Vec::new(),
                    basis: vec![Vec::new(); n_el],
                    correctors: vec![SparseVec::default(); n_el],
                    eigen_keys: vec![Vec::new(); n_el],
                    basis_keys: vec![Vec::new(); n_el],
                    layouts,
                }
            }
        };
        let fresh = space.eigen.is_empty();
        let rebuild: Vec<usize> = if fresh {
            (0..n_el).collect()
        } else {
            refresh_policy(&space, bvals)
        };
        for e in 0..n_el {
            let k = key(&space.layouts[e].eigen_nodes, bvals);
            if fresh || k != space.eigen_keys[e] {
                let basis = solve_local_spectral(
                    self.mesh,
                    self.spec,
                    self.field,
                    self.weight,
                    e,
                    bvals,
                    self.config.n_eigen,
                )?;
                if fresh {
                    space.eigen.push(basis);
                } else {
                    space.eigen[e] = basis;
                }
                space.eigen_keys[e] = k;
            }
        }
        for &e in &rebuild {
            let (basis, corrector) = self.rebuild_element(&space, e, bvals)?;
            space.basis[e] = basis;
            space.correctors[e] = corrector;
            space.basis_keys[e] = key(&space.layouts[e].domain_nodes, bvals);
        }
        self.space = Some(space);
        Ok(rebuild)
    }

    /// Discards the cache so the next call rebuilds everything.
    pub fn clear_cache(&mut self) {
        self.space = None;
    }

    fn is_floating(&self, bvals: &[f64]) -> bool {
        !self.spec.has_dirichlet()
            && self
                .trace_weights
                .iter()
                .zip(bvals)
                .all(|(&w, &b)| w == 0.0 || b == 0.0)
    }

    /// One multiscale solve: correctors, basis, coarse Galerkin system, reconstruction.
    pub fn solve(&mut self, bvals: &[f64]) -> Result<CemStep> {
        let rebuilt = self.update_space(bvals)?;
        let space = self.space.as_ref().expect("space built above");
        let mesh = self.mesh;
        let n = mesh.num_nodes();

        let trace: Vec<f64> = self
            .trace_weights
            .iter()
            .zip(bvals)
            .map(|(w, b)| w * b)
            .collect();
        let apply_k = |x: &[f64]| -> Vec<f64> {
            let mut y = self.stiffness.mul_vec(x);
            y.iter_mut().zip(&trace).zip(x).for_each(|((yi, t), xi)| *yi += t * xi);
            y
        };

        let floating = self.is_floating(bvals);
        let mut rhs_fine = self.load.to_vec();
        if floating {
            // Pure Neumann problem: keep only the compatible part of the load.
            let total: f64 = rhs_fine.iter().sum();
            let area: f64 = self.nodal_area.iter().sum();
            rhs_fine
                .iter_mut()
                .zip(&self.nodal_area)
                .for_each(|(r, a)| *r -= total / area * a);
        }
        let corr = space.corrector_sum(n);
        let k_corr = apply_k(&corr);
        rhs_fine.iter_mut().zip(&k_corr).for_each(|(r, k)| *r -= k);

        // flattened basis index
        let mut offsets = Vec::with_capacity(space.basis.len() + 1);
        offsets.push(0usize);
        for b in &space.basis {
            offsets.push(offsets.last().unwrap() + b.len());
        }
        let dim = *offsets.last().unwrap();

        let mut work = vec![0.0; n];
        let mut kpsi = vec![0.0; n];
        let mut triplets = Vec::new();
        let mut rhs = vec![0.0; dim];
        for (e, funcs) in space.basis.iter().enumerate() {
            let cells = space.layouts[e].domain.cells;
            let box_nodes = mesh.box_nodes(&cells);
            for (j, psi) in funcs.iter().enumerate() {
                let a = offsets[e] + j;
                psi.add_to(1.0, &mut work);
                for &r in &box_nodes {
                    kpsi[r] = self.stiffness.row(r).map(|(c, v)| v * work[c]).sum::<f64>()
                        + trace[r] * work[r];
                }
                psi.add_to(-1.0, &mut work);
                rhs[a] = psi.dot_dense(&rhs_fine);
                for &k in &self.neighbours[e] {
                    for (jj, other) in space.basis[k].iter().enumerate() {
                        let b = offsets[k] + jj;
                        if b < a {
                            continue;
                        }
                        let g = other.dot_dense(&kpsi);
                        if g != 0.0 {
                            triplets.push((a, b, g));
                            if b != a {
                                triplets.push((b, a, g));
                            }
                        }
                    }
                }
                for &r in &box_nodes {
                    kpsi[r] = 0.0;
                }
            }
        }
        let g = SparseMatrix::from_triplets(dim, triplets);
        let w = solve_coarse(&g, &rhs)?;

        let mut u = corr;
        for (e, funcs) in space.basis.iter().enumerate() {
            for (j, psi) in funcs.iter().enumerate() {
                psi.add_to(w[offsets[e] + j], &mut u);
            }
        }
        if floating {
            let area: f64 = self.nodal_area.iter().sum();
            let mean: f64 = u.iter().zip(&self.nodal_area).map(|(x, a)| x * a).sum::<f64>() / area;
            u.iter_mut().for_each(|x| *x -= mean);
        }
        Ok(CemStep {
            u,
            rebuilt,
            coarse_dim: dim,
        })
    }
}

/// Solves the coarse Galerkin system. Rank-deficient systems (possible when the local
/// spaces are large enough to make the basis linearly dependent) fall back to a
/// truncated eigendecomposition, which returns the minimum-norm solution.
pub fn solve_coarse(g: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let dim = g.order();
    if dim > DENSE_COARSE_LIMIT {
        let chol = Cholesky::factor(g)?;
        return Ok(chol.solve(rhs));
    }
    let dense = g.to_dense();
    let max_diag = (0..dim).map(|i| dense[(i, i)]).fold(0.0, f64::max);
    if let Some(chol) = dense.clone().cholesky() {
        let min_pivot = (0..dim).map(|i| chol.l_dirty()[(i, i)].powi(2)).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-13 * max_diag {
            return Ok(chol.solve(&DVector::from_column_slice(rhs)).iter().copied().collect());
        }
    }
    let eig = dense.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if lmax == 0.0 {
        return Err(SolveError::Singular.into());
    }
    let b = DVector::from_column_slice(rhs);
    let coeff = eig.eigenvectors.transpose() * b;
    let mut x = DVector::zeros(dim);
    for k in 0..dim {
        let lam = eig.eigenvalues[k];
        if lam > 1e-12 * lmax {
            x += eig.eigenvectors.column(k) * (coeff[k] / lam);
        }
    }
    Ok(x.iter().copied().collect())
}

/// Fine-grid reference for one Robin solve (used for the space-completeness checks).
pub fn fine_robin_solve(
    stiffness: &SparseMatrix,
    trace: &[f64],
    load: &[f64],
    dirichlet: &[bool],
) -> Result<Vec<f64>> {
    let k = stiffness.add_diagonal(trace);
    let (k, f) = apply_dirichlet(&k, load, dirichlet);
    let chol = Cholesky::factor(&k)?;
    Ok(chol.solve(&f))
}

/// Nodes on the contact boundary of a closed cell box.
pub fn contact_nodes_in(mesh: &StructuredMesh, spec: &BoundarySpec, cells: &CellBox) -> Vec<usize> {
    contact_nodes_of(mesh, spec, cells)
}
