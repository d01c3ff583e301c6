use icem::fem::{
    assemble_contact_trace, assemble_mass, assemble_stiffness, assemble_weighted_mass, NeumannData, Source,
};
use icem::field::{from_values, spectral_weight, synth_medium, MediumKind, PermField, WeightMode};
use icem::mesh::{build_mesh, BoundaryKind, Geometry};
use icem::oracle::{naive_mass, naive_stiffness};
use icem::sparse::SparseMatrix;
use icem::spectral::{generalized_eigen, local_operators, solve_local_spectral};
use nalgebra::DMatrix;

fn relative_asymmetry(m: &SparseMatrix) -> f64 {
    m.asymmetry() / m.max_abs()
}

#[test]
fn fem_operators_match_naive_quadrature() {
    let (mesh, spec) = build_mesh(12, 3, Geometry::MixedDnc).unwrap();
    let field = synth_medium(MediumKind::MixedC, 3, 1e3, &mesh).unwrap();
    let a = assemble_stiffness(&mesh, &field).to_dense();
    let a_ref = naive_stiffness(&mesh, &field);
    assert!((&a - &a_ref).amax() <= 1e-12 * a_ref.amax());

    let weight = spectral_weight(&field, &mesh, WeightMode::Simplified);
    let cells: Vec<usize> = (0..mesh.num_cells()).filter(|c| c % 3 != 0).collect();
    let s = assemble_weighted_mass(&mesh, &weight, &cells).to_dense();
    let s_ref = naive_mass(&mesh, &cells, |c| weight.value(c));
    assert!((&s - &s_ref).amax() <= 1e-12 * s_ref.amax());

    let all: Vec<usize> = (0..mesh.num_cells()).collect();
    let m = assemble_mass(&mesh).to_dense();
    assert!((&m - naive_mass(&mesh, &all, |_| 1.0)).amax() <= 1e-15);
    let b: Vec<f64> = (0..mesh.num_nodes()).map(|n| n as f64).collect();
    let t = assemble_contact_trace(&mesh, &b, spec.edges()).unwrap();
    for n in 0..mesh.num_nodes() {
        let expected = if spec.is_contact(n) { b[n] * mesh.h() } else { 0.0 };
        let (i, _) = mesh.node_ij(n);
        // bottom corners touch one contact edge only
        let expected = if i == 0 || i == mesh.nx() { 0.5 * expected } else { expected };
        assert!((t.get(n, n) - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

#[test]
fn all_operators_symmetric() {
    let (mesh, spec) = build_mesh(20, 4, Geometry::AllContact).unwrap();
    let field = synth_medium(MediumKind::Channels, 8, 1e3, &mesh).unwrap();
    let weight = spectral_weight(&field, &mesh, WeightMode::LagrangeSum);
    let cells: Vec<usize> = (0..mesh.num_cells()).collect();
    let b: Vec<f64> = (0..mesh.num_nodes()).map(|n| (n % 5) as f64 * 100.0).collect();
    let ops = [
        assemble_stiffness(&mesh, &field),
        assemble_mass(&mesh),
        assemble_weighted_mass(&mesh, &weight, &cells),
        assemble_contact_trace(&mesh, &b, spec.edges()).unwrap(),
    ];
    for op in &ops {
        assert!(relative_asymmetry(op) <= 1e-14);
    }
    let (_, a, s) = local_operators(&mesh, &spec, &field, &weight, 0, &b).unwrap();
    assert!((&a - a.transpose()).amax() <= 1e-14 * a.amax());
    assert!((&s - s.transpose()).amax() <= 1e-14 * s.amax());
}

#[test]
fn neumann_and_source_loads_vanish_for_zero_data() {
    let (mesh, spec) = build_mesh(8, 2, Geometry::MixedDnc).unwrap();
    let f = icem::fem::assemble_load(&mesh, &Source::Zero);
    let p = icem::fem::assemble_neumann_load(&mesh, &spec, &NeumannData::Zero, |_| true);
    assert!(f.iter().chain(&p).all(|&v| v == 0.0));
}

#[test]
fn constant_coefficient_spectrum_is_scaled_neumann_laplacian() {
    let (mesh, spec) = build_mesh(12, 3, Geometry::MixedDnc).unwrap();
    let field = PermField::constant(&mesh, 1.0);
    let weight = spectral_weight(&field, &mesh, WeightMode::Simplified);
    let c = weight.value(0);
    let b = vec![0.0; mesh.num_nodes()];
    let e = mesh.coarse(1, 1);
    let l = 16;
    let basis = solve_local_spectral(&mesh, &spec, &field, &weight, e, &b, l).unwrap();

    // dense oracle: Neumann Laplacian of the element against its unweighted mass
    let nodes = mesh.box_nodes(&mesh.coarse_cells(e));
    let cells = mesh.box_cells(&mesh.coarse_cells(e));
    // coefficient negligible outside the element, so the restriction is the Neumann operator
    let mut inside = vec![1e-300; mesh.num_cells()];
    for &cell in &cells {
        inside[cell] = 1.0;
    }
    let a_full = naive_stiffness(&mesh, &from_values(inside, &mesh).unwrap());
    let m_full = naive_mass(&mesh, &cells, |_| 1.0);
    let k = nodes.len();
    let a = DMatrix::from_fn(k, k, |r, s| a_full[(nodes[r], nodes[s])]);
    let m = DMatrix::from_fn(k, k, |r, s| m_full[(nodes[r], nodes[s])]);
    let (lam, _) = generalized_eigen(&a, &m);
    for j in 0..l {
        let expected = lam[j] / c;
        assert!(
            (basis.eigenvalues[j] - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
            "j={j}: {} vs {expected}",
            basis.eigenvalues[j]
        );
    }
}

#[test]
fn eigenpairs_satisfy_rayleigh_quotient() {
    let (mesh, spec) = build_mesh(24, 4, Geometry::AllContact).unwrap();
    let field = synth_medium(MediumKind::MixedC, 4, 1e3, &mesh).unwrap();
    let weight = spectral_weight(&field, &mesh, WeightMode::Simplified);
    let b = vec![1e4; mesh.num_nodes()];
    for e in 0..mesh.num_coarse() {
        let (_, a, s) = local_operators(&mesh, &spec, &field, &weight, e, &b).unwrap();
        let basis = solve_local_spectral(&mesh, &spec, &field, &weight, e, &b, 4).unwrap();
        for j in 0..4 {
            let phi = basis.vectors.column(j);
            let lam = basis.eigenvalues[j];
            let q = (phi.transpose() * &a * phi)[0] - lam * (phi.transpose() * &s * phi)[0];
            assert!(q.abs() <= 1e-8 * (1.0 + lam), "element {e} pair {j}: {q:e}");
            assert!(lam >= -1e-10);
        }
    }
}

#[test]
fn every_boundary_node_has_one_tag() {
    for geometry in [Geometry::AllContact, Geometry::MixedDnc] {
        let (mesh, spec) = build_mesh(8, 4, geometry).unwrap();
        for n in 0..mesh.num_nodes() {
            let (i, j) = mesh.node_ij(n);
            let on_boundary = i == 0 || j == 0 || i == mesh.nx() || j == mesh.ny();
            assert_eq!(spec.tag(n).is_some(), on_boundary);
        }
        let total: usize = [BoundaryKind::Dirichlet, BoundaryKind::Neumann, BoundaryKind::Contact]
            .iter()
            .map(|&k| spec.nodes_of(k).len())
            .sum();
        assert_eq!(total, 4 * mesh.nx());
    }
}
