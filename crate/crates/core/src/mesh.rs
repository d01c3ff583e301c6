//! Nested fine/coarse Cartesian grids on the unit square.
//!
//! Numbering is row-major everywhere: node `(i, j)` has index `j * (nx + 1) + i`,
//! fine cell `(i, j)` has index `j * nx + i`, coarse element `(I, J)` has index
//! `J * cnx + I`. The `x` index runs fastest.

use crate::error::{Error, Result};

/// The two model geometries used in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Geometry {
    /// All of the boundary is a contact boundary.
    AllContact,
    /// Dirichlet on top, contact on bottom, Neumann on the two sides.
    MixedDnc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
    Contact,
}

impl BoundaryKind {
    /// Corner nodes take the tag with the highest priority.
    fn priority(self) -> u8 {
        match self {
            BoundaryKind::Dirichlet => 2,
            BoundaryKind::Contact => 1,
            BoundaryKind::Neumann => 0,
        }
    }
}

/// Rectangle of fine cells `[i0, i1) x [j0, j1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellBox {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl CellBox {
    pub fn is_empty(&self) -> bool {
        self.i1 <= self.i0 || self.j1 <= self.j0
    }

    pub fn num_cells(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.i1 - self.i0) * (self.j1 - self.j0)
        }
    }

    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        i >= self.i0 && i < self.i1 && j >= self.j0 && j < self.j1
    }

    /// Number of nodes per row of the closed box.
    pub fn node_cols(&self) -> usize {
        self.i1 - self.i0 + 1
    }

    pub fn node_rows(&self) -> usize {
        self.j1 - self.j0 + 1
    }

    pub fn num_nodes(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.node_cols() * self.node_rows()
        }
    }

    pub fn contains_node(&self, i: usize, j: usize) -> bool {
        !self.is_empty() && i >= self.i0 && i <= self.i1 && j >= self.j0 && j <= self.j1
    }

    /// Local row-major index of global node `(i, j)`, if it lies in the closed box.
    pub fn local_node(&self, i: usize, j: usize) -> Option<usize> {
        self.contains_node(i, j)
            .then(|| (j - self.j0) * self.node_cols() + (i - self.i0))
    }

    pub fn intersects(&self, other: &CellBox) -> bool {
        self.i0 < other.i1 && other.i0 < self.i1 && self.j0 < other.j1 && other.j0 < self.j1
    }
}

#[derive(Clone, Debug)]
pub struct StructuredMesh {
    nx: usize,
    ny: usize,
    cnx: usize,
    cny: usize,
}

impl StructuredMesh {
    pub fn new(nx: usize, ny: usize, cnx: usize, cny: usize) -> Result<Self> {
        for (fine, coarse, axis) in [(nx, cnx, "x"), (ny, cny, "y")] {
            if coarse < 2 {
                return Err(Error::Config(format!(
                    "coarse cell count along {axis} must be at least 2, got {coarse}"
                )));
            }
            if fine % coarse != 0 {
                return Err(Error::Config(format!(
                    "fine cell count {fine} along {axis} is not divisible by coarse count {coarse}"
                )));
            }
            if fine < 2 * coarse {
                return Err(Error::Config(format!(
                    "fine cell count {fine} along {axis} must be at least twice the coarse count {coarse}"
                )));
            }
        }
        Ok(Self { nx, ny, cnx, cny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn coarse_nx(&self) -> usize {
        self.cnx
    }

    pub fn coarse_ny(&self) -> usize {
        self.cny
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    /// Fine mesh size (the x spacing; cells are square for meshes from [`build_mesh`]).
    pub fn h(&self) -> f64 {
        self.hx()
    }

    pub fn coarse_hx(&self) -> f64 {
        1.0 / self.cnx as f64
    }

    pub fn coarse_hy(&self) -> f64 {
        1.0 / self.cny as f64
    }

    /// Coarse mesh size `H`.
    pub fn coarse_h(&self) -> f64 {
        self.coarse_hx()
    }

    /// Fine cells per coarse element along x.
    pub fn ratio_x(&self) -> usize {
        self.nx / self.cnx
    }

    pub fn ratio_y(&self) -> usize {
        self.ny / self.cny
    }

    pub fn node_cols(&self) -> usize {
        self.nx + 1
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn num_coarse(&self) -> usize {
        self.cnx * self.cny
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % (self.nx + 1), n / (self.nx + 1))
    }

    pub fn node_coords(&self, n: usize) -> (f64, f64) {
        let (i, j) = self.node_ij(n);
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.nx, c / self.nx)
    }

    pub fn cell_center(&self, c: usize) -> (f64, f64) {
        let (i, j) = self.cell_ij(c);
        ((i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy())
    }

    /// Nodes of cell `(i, j)` in local order `(0,0), (1,0), (0,1), (1,1)`.
    pub fn cell_nodes_ij(&self, i: usize, j: usize) -> [usize; 4] {
        let n0 = self.node(i, j);
        let c = self.nx + 1;
        [n0, n0 + 1, n0 + c, n0 + c + 1]
    }

    pub fn cell_nodes(&self, c: usize) -> [usize; 4] {
        let (i, j) = self.cell_ij(c);
        self.cell_nodes_ij(i, j)
    }

    pub fn coarse(&self, ci: usize, cj: usize) -> usize {
        cj * self.cnx + ci
    }

    pub fn coarse_ij(&self, e: usize) -> (usize, usize) {
        (e % self.cnx, e / self.cnx)
    }

    pub fn coarse_of_cell(&self, c: usize) -> usize {
        let (i, j) = self.cell_ij(c);
        self.coarse(i / self.ratio_x(), j / self.ratio_y())
    }

    /// Fine cells covered by the coarse index range `[ci0, ci1] x [cj0, cj1]` (inclusive).
    pub fn coarse_range_cells(&self, ci0: usize, ci1: usize, cj0: usize, cj1: usize) -> CellBox {
        let (rx, ry) = (self.ratio_x(), self.ratio_y());
        CellBox {
            i0: ci0 * rx,
            i1: (ci1 + 1) * rx,
            j0: cj0 * ry,
            j1: (cj1 + 1) * ry,
        }
    }

    /// Fine cells of coarse element `e`.
    pub fn coarse_cells(&self, e: usize) -> CellBox {
        let (ci, cj) = self.coarse_ij(e);
        self.coarse_range_cells(ci, ci, cj, cj)
    }

    pub fn whole(&self) -> CellBox {
        CellBox {
            i0: 0,
            i1: self.nx,
            j0: 0,
            j1: self.ny,
        }
    }

    /// Global node ids of a closed cell box, in local row-major order.
    pub fn box_nodes(&self, b: &CellBox) -> Vec<usize> {
        if b.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(b.num_nodes());
        for j in b.j0..=b.j1 {
            for i in b.i0..=b.i1 {
                out.push(self.node(i, j));
            }
        }
        out
    }

    /// Global cell ids of a cell box, row-major.
    pub fn box_cells(&self, b: &CellBox) -> Vec<usize> {
        let mut out = Vec::with_capacity(b.num_cells());
        for j in b.j0..b.j1 {
            for i in b.i0..b.i1 {
                out.push(self.cell(i, j));
            }
        }
        out
    }

    /// The coarse elements whose closure contains node `n`.
    pub fn coarse_of_node(&self, n: usize) -> Vec<usize> {
        let (i, j) = self.node_ij(n);
        let (rx, ry) = (self.ratio_x(), self.ratio_y());
        let xs: Vec<usize> = candidates(i, rx, self.cnx);
        let ys: Vec<usize> = candidates(j, ry, self.cny);
        let mut out = Vec::with_capacity(4);
        for &cj in &ys {
            for &ci in &xs {
                out.push(self.coarse(ci, cj));
            }
        }
        out
    }
}

fn candidates(idx: usize, ratio: usize, count: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(2);
    if idx % ratio == 0 {
        if idx > 0 {
            v.push(idx / ratio - 1);
        }
        if idx / ratio < count {
            v.push(idx / ratio);
        }
    } else {
        v.push(idx / ratio);
    }
    v
}

/// One fine edge on the outer boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryEdge {
    /// Endpoints ordered by increasing coordinate along the side.
    pub nodes: [usize; 2],
    pub side: Side,
    pub kind: BoundaryKind,
    pub length: f64,
}

#[derive(Clone, Debug)]
pub struct BoundarySpec {
    sides: [BoundaryKind; 4],
    node_tags: Vec<Option<BoundaryKind>>,
    edges: Vec<BoundaryEdge>,
}

impl BoundarySpec {
    /// Assigns one boundary kind to each side, in the order bottom, right, top, left.
    pub fn from_sides(mesh: &StructuredMesh, sides: [BoundaryKind; 4]) -> Self {
        let mut edges = Vec::with_capacity(2 * (mesh.nx() + mesh.ny()));
        let mut node_tags: Vec<Option<BoundaryKind>> = vec![None; mesh.num_nodes()];
        let (nx, ny) = (mesh.nx(), mesh.ny());
        for (side, kind) in Side::ALL.into_iter().zip(sides) {
            let (count, len) = match side {
                Side::Bottom | Side::Top => (nx, mesh.hx()),
                Side::Left | Side::Right => (ny, mesh.hy()),
            };
            for k in 0..count {
                let nodes = match side {
                    Side::Bottom => [mesh.node(k, 0), mesh.node(k + 1, 0)],
                    Side::Top => [mesh.node(k, ny), mesh.node(k + 1, ny)],
                    Side::Left => [mesh.node(0, k), mesh.node(0, k + 1)],
                    Side::Right => [mesh.node(nx, k), mesh.node(nx, k + 1)],
                };
                edges.push(BoundaryEdge {
                    nodes,
                    side,
                    kind,
                    length: len,
                });
                for n in nodes {
                    let tag = &mut node_tags[n];
                    match tag {
                        Some(old) if old.priority() >= kind.priority() => {}
                        _ => *tag = Some(kind),
                    }
                }
            }
        }
        Self {
            sides,
            node_tags,
            edges,
        }
    }

    pub fn sides(&self) -> [BoundaryKind; 4] {
        self.sides
    }

    pub fn tag(&self, node: usize) -> Option<BoundaryKind> {
        self.node_tags[node]
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.node_tags[node] == Some(BoundaryKind::Dirichlet)
    }

    pub fn is_contact(&self, node: usize) -> bool {
        self.node_tags[node] == Some(BoundaryKind::Contact)
    }

    pub fn has_dirichlet(&self) -> bool {
        self.sides.contains(&BoundaryKind::Dirichlet)
    }

    pub fn edges(&self) -> &[BoundaryEdge] {
        &self.edges
    }

    pub fn edges_of(&self, kind: BoundaryKind) -> impl Iterator<Item = &BoundaryEdge> + '_ {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// Node ids with the given tag, ascending.
    pub fn nodes_of(&self, kind: BoundaryKind) -> Vec<usize> {
        self.node_tags
            .iter()
            .enumerate()
            .filter_map(|(n, t)| (*t == Some(kind)).then_some(n))
            .collect()
    }

    pub fn dirichlet_mask(&self) -> Vec<bool> {
        self.node_tags
            .iter()
            .map(|t| *t == Some(BoundaryKind::Dirichlet))
            .collect()
    }
}

/// Builds the square fine/coarse mesh pair and its boundary classification.
pub fn build_mesh(
    nx_fine: usize,
    nx_coarse: usize,
    geometry: Geometry,
) -> Result<(StructuredMesh, BoundarySpec)> {
    let mesh = StructuredMesh::new(nx_fine, nx_fine, nx_coarse, nx_coarse)?;
    use BoundaryKind::*;
    let sides = match geometry {
        Geometry::AllContact => [Contact; 4],
        Geometry::MixedDnc => [Contact, Neumann, Dirichlet, Neumann],
    };
    let spec = BoundarySpec::from_sides(&mesh, sides);
    Ok((mesh, spec))
}

/// A coarse element augmented by `layers` rings of neighbouring coarse elements.
#[derive(Clone, Debug)]
pub struct OversampleDomain {
    pub element: usize,
    pub layers: usize,
    /// Inclusive coarse index range `[ci0, ci1] x [cj0, cj1]`.
    pub coarse_range: (usize, usize, usize, usize),
    pub cells: CellBox,
    /// Per local node (row-major over `cells`): true where local functions vanish.
    constrained: Vec<bool>,
}

impl OversampleDomain {
    pub fn num_nodes(&self) -> usize {
        self.cells.num_nodes()
    }

    pub fn is_constrained_local(&self, local: usize) -> bool {
        self.constrained[local]
    }

    /// Coarse elements inside the domain, row-major.
    pub fn coarse_elements(&self, mesh: &StructuredMesh) -> Vec<usize> {
        let (ci0, ci1, cj0, cj1) = self.coarse_range;
        let mut out = Vec::with_capacity((ci1 - ci0 + 1) * (cj1 - cj0 + 1));
        for cj in cj0..=cj1 {
            for ci in ci0..=ci1 {
                out.push(mesh.coarse(ci, cj));
            }
        }
        out
    }

    /// Global ids of the nodes where local functions are free, in local row-major order.
    pub fn free_nodes(&self, mesh: &StructuredMesh) -> Vec<usize> {
        mesh.box_nodes(&self.cells)
            .into_iter()
            .zip(&self.constrained)
            .filter_map(|(n, &c)| (!c).then_some(n))
            .collect()
    }

    /// Global ids of the nodes on `∂K_i^m ∩ Ω` and `∂K_i^m ∩ Γ_D`.
    pub fn constrained_nodes(&self, mesh: &StructuredMesh) -> Vec<usize> {
        mesh.box_nodes(&self.cells)
            .into_iter()
            .zip(&self.constrained)
            .filter_map(|(n, &c)| c.then_some(n))
            .collect()
    }
}

/// The ℓ∞ ball of radius `layers` around coarse element `element`, clipped to the grid.
pub fn oversample(
    mesh: &StructuredMesh,
    spec: &BoundarySpec,
    element: usize,
    layers: usize,
) -> Result<OversampleDomain> {
    if layers < 1 {
        return Err(Error::Config("oversampling layers must be at least 1".into()));
    }
    if element >= mesh.num_coarse() {
        return Err(Error::Config(format!(
            "coarse element {element} out of range ({} elements)",
            mesh.num_coarse()
        )));
    }
    let (ci, cj) = mesh.coarse_ij(element);
    let ci0 = ci.saturating_sub(layers);
    let cj0 = cj.saturating_sub(layers);
    let ci1 = (ci + layers).min(mesh.coarse_nx() - 1);
    let cj1 = (cj + layers).min(mesh.coarse_ny() - 1);
    let cells = mesh.coarse_range_cells(ci0, ci1, cj0, cj1);

    let mut constrained = Vec::with_capacity(cells.num_nodes());
    for j in cells.j0..=cells.j1 {
        for i in cells.i0..=cells.i1 {
            // A node is interior to the box's support unless an incident cell lies outside it.
            let cut_x = (i == cells.i0 && i > 0) || (i == cells.i1 && i < mesh.nx());
            let cut_y = (j == cells.j0 && j > 0) || (j == cells.j1 && j < mesh.ny());
            let n = mesh.node(i, j);
            constrained.push(cut_x || cut_y || spec.is_dirichlet(n));
        }
    }
    Ok(OversampleDomain {
        element,
        layers,
        coarse_range: (ci0, ci1, cj0, cj1),
        cells,
        constrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_mesh_counts() {
        let (mesh, spec) = build_mesh(400, 80, Geometry::MixedDnc).unwrap();
        assert_eq!(mesh.h(), 1.0 / 400.0);
        assert_eq!(mesh.coarse_h(), 1.0 / 80.0);
        assert_eq!(mesh.num_nodes(), 401 * 401);
        for i in 0..=400 {
            assert!(spec.is_contact(mesh.node(i, 0)));
        }
    }

    #[test]
    fn all_contact_tags_every_boundary_node() {
        let (mesh, spec) = build_mesh(4, 2, Geometry::AllContact).unwrap();
        assert_eq!(mesh.num_nodes(), 25);
        assert_eq!(spec.nodes_of(BoundaryKind::Contact).len(), 16);
        assert!(spec.nodes_of(BoundaryKind::Dirichlet).is_empty());
        assert!(spec.tag(mesh.node(2, 2)).is_none());
    }

    #[test]
    fn mixed_corner_dominance() {
        let (mesh, spec) = build_mesh(8, 4, Geometry::MixedDnc).unwrap();
        for i in 0..=8 {
            assert_eq!(spec.tag(mesh.node(i, 8)), Some(BoundaryKind::Dirichlet));
            assert_eq!(spec.tag(mesh.node(i, 0)), Some(BoundaryKind::Contact));
        }
        for j in 1..8 {
            assert_eq!(spec.tag(mesh.node(0, j)), Some(BoundaryKind::Neumann));
            assert_eq!(spec.tag(mesh.node(8, j)), Some(BoundaryKind::Neumann));
        }
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(build_mesh(10, 3, Geometry::AllContact), Err(Error::Config(_))));
        assert!(matches!(build_mesh(10, 1, Geometry::AllContact), Err(Error::Config(_))));
        assert!(matches!(build_mesh(6, 4, Geometry::AllContact), Err(Error::Config(_))));
    }

    #[test]
    fn oversample_blocks() {
        let (mesh, spec) = build_mesh(10, 5, Geometry::AllContact).unwrap();
        let d = oversample(&mesh, &spec, mesh.coarse(2, 2), 1).unwrap();
        assert_eq!(d.coarse_elements(&mesh).len(), 9);
        let d = oversample(&mesh, &spec, 0, 2).unwrap();
        assert_eq!(d.coarse_elements(&mesh).len(), 9);

        let (mesh6, spec6) = build_mesh(12, 6, Geometry::AllContact).unwrap();
        let d = oversample(&mesh6, &spec6, mesh6.coarse(2, 2), 2).unwrap();
        assert_eq!(d.coarse_elements(&mesh6).len(), 25);
        assert!(oversample(&mesh6, &spec6, 0, 0).is_err());
    }

    #[test]
    fn oversample_constraints_exclude_outer_boundary() {
        let (mesh, spec) = build_mesh(8, 4, Geometry::MixedDnc).unwrap();
        // bottom-left element, one layer: covers cells [0,4) x [0,4)
        let d = oversample(&mesh, &spec, 0, 1).unwrap();
        let constrained = d.constrained_nodes(&mesh);
        // interior cut lines x = 4 and y = 4 only
        assert_eq!(constrained.len(), 9);
        assert!(!constrained.contains(&mesh.node(0, 0)));
        assert!(constrained.contains(&mesh.node(4, 0)));
        // top element touching Dirichlet side
        let d = oversample(&mesh, &spec, mesh.coarse(0, 3), 1).unwrap();
        for i in 0..=4 {
            assert!(d.constrained_nodes(&mesh).contains(&mesh.node(i, 8)));
        }
    }

    #[test]
    fn every_node_in_one_to_four_coarse_closures() {
        let (mesh, _) = build_mesh(8, 4, Geometry::AllContact).unwrap();
        for n in 0..mesh.num_nodes() {
            let k = mesh.coarse_of_node(n).len();
            assert!((1..=4).contains(&k), "node {n} in {k} elements");
        }
        assert_eq!(mesh.coarse_of_node(mesh.node(1, 1)), vec![mesh.coarse(0, 0)]);
        assert_eq!(mesh.coarse_of_node(mesh.node(2, 2)).len(), 4);
        assert_eq!(mesh.coarse_of_node(mesh.node(8, 8)), vec![mesh.coarse(3, 3)]);
    }
}
