use icem::field::{spectral_weight, synth_medium, MediumKind, WeightMode};
use icem::fem::{assemble_mass, assemble_stiffness};
use icem::linsolve::{solve_spd, Method, SolverOptions};
use icem::mesh::{build_mesh, oversample, Geometry, StructuredMesh};
use icem::metrics::{energy_norm, l2_norm};
use icem::sparse::SparseMatrix;
use icem::spectral::solve_local_spectral;
use proptest::prelude::*;

fn kind(k: u8) -> MediumKind {
    match k % 3 {
        0 => MediumKind::Inclusions,
        1 => MediumKind::Channels,
        _ => MediumKind::MixedC,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oversampling_is_monotone_and_eventually_whole(nc in 2usize..7, e_seed in 0usize..100, m in 1usize..4) {
        let (mesh, spec) = build_mesh(2 * nc, nc, Geometry::MixedDnc).unwrap();
        let e = e_seed % mesh.num_coarse();
        let small = oversample(&mesh, &spec, e, m).unwrap().cells;
        let large = oversample(&mesh, &spec, e, m + 1).unwrap().cells;
        prop_assert!(large.i0 <= small.i0 && large.j0 <= small.j0);
        prop_assert!(large.i1 >= small.i1 && large.j1 >= small.j1);
        let whole = oversample(&mesh, &spec, e, nc).unwrap().cells;
        prop_assert_eq!(whole, mesh.whole());
    }

    #[test]
    fn coarse_elements_partition_cells(nc in 2usize..6, r in 2usize..4) {
        let mesh = StructuredMesh::new(nc * r, nc * r, nc, nc).unwrap();
        let mut owner = vec![usize::MAX; mesh.num_cells()];
        for e in 0..mesh.num_coarse() {
            for c in mesh.box_cells(&mesh.coarse_cells(e)) {
                prop_assert_eq!(owner[c], usize::MAX);
                owner[c] = e;
                prop_assert_eq!(mesh.coarse_of_cell(c), e);
            }
        }
        prop_assert!(owner.iter().all(|&o| o != usize::MAX));
    }

    #[test]
    fn spectral_weight_is_linear(seed in 0u64..1000, k in 0u8..3, c in 0.1f64..100.0) {
        let mesh = StructuredMesh::new(20, 20, 4, 4).unwrap();
        let field = synth_medium(kind(k), seed, 50.0, &mesh).unwrap();
        for mode in [WeightMode::Simplified, WeightMode::LagrangeSum] {
            let w = spectral_weight(&field, &mesh, mode);
            let wc = spectral_weight(&field.scaled(c), &mesh, mode);
            for (a, b) in w.values().iter().zip(wc.values()) {
                prop_assert!(*a > 0.0);
                prop_assert!((c * a - b).abs() <= 1e-12 * b.abs());
            }
        }
    }

    #[test]
    fn synthesized_media_are_binary_and_reproducible(seed in 0u64..1000, k in 0u8..3, kr in 1.0f64..1e4) {
        let mesh = StructuredMesh::new(40, 40, 4, 4).unwrap();
        let a = synth_medium(kind(k), seed, kr, &mesh).unwrap();
        let b = synth_medium(kind(k), seed, kr, &mesh).unwrap();
        prop_assert_eq!(a.values(), b.values());
        prop_assert!(a.values().iter().all(|&v| v == 1.0 || v == kr));
    }

    #[test]
    fn eigenvalues_increase_with_robin_coefficient(seed in 0u64..200, node_pick in 0usize..1000, bump in 1.0f64..1e4) {
        let (mesh, spec) = build_mesh(12, 3, Geometry::AllContact).unwrap();
        let field = synth_medium(MediumKind::MixedC, seed, 100.0, &mesh).unwrap();
        let w = spectral_weight(&field, &mesh, WeightMode::Simplified);
        let mut b = vec![10.0; mesh.num_nodes()];
        let e = 0;
        let l = 16;
        let before = solve_local_spectral(&mesh, &spec, &field, &w, e, &b, l).unwrap();
        let contact: Vec<usize> = before.nodes.iter().copied().filter(|&n| spec.is_contact(n)).collect();
        b[contact[node_pick % contact.len()]] += bump;
        let after = solve_local_spectral(&mesh, &spec, &field, &w, e, &b, l).unwrap();
        for (x, y) in before.eigenvalues.iter().zip(&after.eigenvalues) {
            prop_assert!(*y >= x - 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn norms_are_homogeneous(c in -10.0f64..10.0, seed in 0u64..100) {
        let mesh = StructuredMesh::new(8, 8, 2, 2).unwrap();
        let field = synth_medium(MediumKind::Channels, seed, 10.0, &mesh).unwrap();
        let a = assemble_stiffness(&mesh, &field);
        let m = assemble_mass(&mesh);
        let v: Vec<f64> = (0..mesh.num_nodes()).map(|k| ((k as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
        let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
        prop_assert!((energy_norm(&cv, &a) - c.abs() * energy_norm(&v, &a)).abs() <= 1e-10 * energy_norm(&v, &a).max(1.0));
        prop_assert!((l2_norm(&cv, &m) - c.abs() * l2_norm(&v, &m)).abs() <= 1e-10 * l2_norm(&v, &m).max(1.0));
    }

    #[test]
    fn direct_and_cg_agree_on_grid_laplacians(seed in 0u64..100, shift in 0.01f64..1.0) {
        let mesh = StructuredMesh::new(10, 10, 2, 2).unwrap();
        let field = synth_medium(MediumKind::Inclusions, seed, 100.0, &mesh).unwrap();
        let a = assemble_stiffness(&mesh, &field).add(&SparseMatrix::identity(mesh.num_nodes()).scale(shift));
        let b: Vec<f64> = (0..mesh.num_nodes()).map(|k| (k as f64 * 0.3).cos()).collect();
        let (x, _) = solve_spd(&a, &b, &SolverOptions::default()).unwrap();
        let (y, _) = solve_spd(&a, &b, &SolverOptions { method: Method::Cg, tol: 1e-13, max_iter: 20_000 }).unwrap();
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-8 * scale));
    }
}
