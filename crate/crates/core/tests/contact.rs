use icem::contact::{
    fine_newton_solve, indicator, initial_guess, penalty_energy, residual_norm, residual_vector,
    ContactProblem, InitialGuess, NewtonOptions,
};
use icem::fem::{NeumannData, Source};
use icem::field::{from_values, PermField};
use icem::mesh::{build_mesh, BoundaryKind, Geometry, StructuredMesh};
use icem::metrics::energy_norm;
use icem::oracle::{contact_vi, naive_stiffness, solve_vi_projected};
use icem::sparse::{norm2, norm_inf};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A horizontal high-permeability channel through the middle of an 8×8 grid.
fn channel_field(mesh: &StructuredMesh, kappa_r: f64) -> PermField {
    let values = (0..mesh.num_cells())
        .map(|c| if mesh.cell_ij(c).1 == 3 { kappa_r } else { 1.0 })
        .collect();
    from_values(values, mesh).unwrap()
}

/// The strip source with its sign flipped, so the solution pushes against the contact side.
fn strip_source(mesh: &StructuredMesh) -> Source {
    Source::CellTable(
        (0..mesh.num_cells())
            .map(|c| {
                let (x, y) = mesh.cell_center(c);
                -Source::F3.eval(x, y).unwrap()
            })
            .collect(),
    )
}

fn small_problem(kappa_r: f64) -> ContactProblem {
    let (mesh, spec) = build_mesh(8, 2, Geometry::MixedDnc).unwrap();
    let field = channel_field(&mesh, kappa_r);
    let source = strip_source(&mesh);
    ContactProblem::new(mesh, spec, field, &source, NeumannData::Zero)
}

fn fine(problem: &ContactProblem, eps: f64) -> Vec<f64> {
    let u0 = vec![0.0; problem.num_nodes()];
    let opts = NewtonOptions {
        eps,
        ..Default::default()
    };
    fine_newton_solve(problem, &u0, &opts).unwrap().last().to_vec()
}

fn max_violation(problem: &ContactProblem, u: &[f64]) -> f64 {
    problem
        .spec
        .nodes_of(BoundaryKind::Contact)
        .iter()
        .map(|&n| u[n].max(0.0))
        .fold(0.0, f64::max)
}

#[test]
fn penalized_solution_matches_variational_inequality() {
    for kappa_r in [1.0, 1e3] {
        let p = small_problem(kappa_r);
        let oracle = contact_vi(&p.mesh, &p.spec, &p.field, &p.load, 1e-11, 2_000_000).unwrap();
        assert!(max_violation(&p, &oracle) == 0.0);
        let u = fine(&p, 1e-4);
        let diff = u.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-3 * norm_inf(&oracle) + 1e-8, "κ_R={kappa_r}: {diff:e}");
        // the constraint must actually bind for the comparison to mean anything
        assert!(max_violation(&p, &u) > 0.0);
    }
}

#[test]
fn violation_and_oracle_distance_shrink_with_penalty() {
    let p = small_problem(1e3);
    let oracle = contact_vi(&p.mesh, &p.spec, &p.field, &p.load, 1e-11, 2_000_000).unwrap();
    let mut last = (f64::INFINITY, f64::INFINITY);
    for eps in [1e-2, 1e-3, 1e-4] {
        let u = fine(&p, eps);
        let v = max_violation(&p, &u);
        let d = u.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(v < last.0 && d < last.1, "ε={eps}: violation {v:e}, distance {d:e}");
        last = (v, d);
    }
}

#[test]
fn violation_bounded_by_penalty_scale() {
    let p = small_problem(1.0);
    let eps = 1e-4;
    let u = fine(&p, eps);
    let f_scale = norm_inf(&p.load) / p.mesh.h();
    assert!(max_violation(&p, &u) <= 10.0 * eps * f_scale);
}

#[test]
fn penalty_energy_decreases_along_newton_iteration() {
    let (mesh, spec) = build_mesh(16, 4, Geometry::AllContact).unwrap();
    let field = channel_field(&mesh, 100.0);
    let p = ContactProblem::new(mesh.clone(), spec.clone(), field, &Source::F1, NeumannData::Zero);
    let eps = 1e-4;
    let u0 = initial_guess(InitialGuess::Linear, &mesh, &spec);
    let run = fine_newton_solve(&p, &u0, &NewtonOptions { eps, ..Default::default() }).unwrap();
    let energies: Vec<f64> = run.iterates.iter().map(|u| penalty_energy(u, eps, &p)).collect();
    for k in 1..energies.len() - 1 {
        assert!(energies[k + 1] <= energies[k] + 1e-10, "{energies:?}");
    }
}

#[test]
fn fixed_point_satisfies_penalized_equation_and_complementarity() {
    let p = small_problem(1e3);
    let eps = 1e-4;
    let u = fine(&p, eps);
    assert!(residual_norm(&u, eps, &p) <= 1e-8 * norm2(&p.load));
    // at contact nodes the penalty force balances the interior residual
    let au = p.forms.stiffness.mul_vec(&u);
    for n in p.spec.nodes_of(BoundaryKind::Contact) {
        if p.spec.is_dirichlet(n) {
            continue;
        }
        let flux = p.load[n] - au[n];
        let penalty = p.trace_weights[n] * u[n].max(0.0) / eps;
        assert!((flux - penalty).abs() <= 1e-8 * norm_inf(&p.load), "node {n}");
    }
    let r = residual_vector(&u, eps, &p);
    assert!(p.dirichlet.iter().zip(&r).all(|(&d, &v)| !d || v == 0.0));
}

#[test]
fn repeated_active_set_gives_identical_iterate() {
    let p = small_problem(1e3);
    let u0 = initial_guess(InitialGuess::Quadratic, &p.mesh, &p.spec);
    let run = fine_newton_solve(&p, &u0, &NewtonOptions::default()).unwrap();
    let sets = &run.active_sets;
    for k in 1..sets.len() {
        if sets[k] == sets[k - 1] {
            let d: Vec<f64> = run.iterates[k + 1].iter().zip(&run.iterates[k]).map(|(a, b)| a - b).collect();
            let scale = energy_norm(&run.iterates[k], &p.forms.stiffness);
            assert!(energy_norm(&d, &p.forms.stiffness) <= 1e-10 * scale);
        }
    }
    assert_eq!(indicator(run.last(), &p.spec), *sets.last().unwrap());
}

#[test]
fn projected_gradient_unconstrained_case() {
    let (mesh, _) = build_mesh(4, 2, Geometry::MixedDnc).unwrap();
    let field = PermField::constant(&mesh, 1.0);
    let a = naive_stiffness(&mesh, &field) + DMatrix::identity(mesh.num_nodes(), mesh.num_nodes());
    // loads pulling the solution negative: the bound never activates
    let f = vec![-1.0; mesh.num_nodes()];
    let u = solve_vi_projected(&a, &f, &[0, 1, 2], 1e-12, 100_000).unwrap();
    let exact = a.clone().lu().solve(&DVector::from_column_slice(&f)).unwrap();
    let diff = u.iter().zip(exact.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10);
}

#[test]
fn projected_gradient_kkt_and_energy() {
    let p = small_problem(1.0);
    let keep: Vec<usize> = (0..p.num_nodes()).filter(|&n| !p.dirichlet[n]).collect();
    let a = naive_stiffness(&p.mesh, &p.field).select_rows(&keep).select_columns(&keep);
    let f: Vec<f64> = keep.iter().map(|&n| p.load[n]).collect();
    let contact: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter_map(|(k, &n)| p.spec.is_contact(n).then_some(k))
        .collect();
    let tol = 1e-11;
    let u = solve_vi_projected(&a, &f, &contact, tol, 2_000_000).unwrap();
    let uv = DVector::from_column_slice(&u);
    let fv = DVector::from_column_slice(&f);
    let multiplier = &fv - &a * &uv;
    let mut binding = 0;
    for (k, &x) in u.iter().enumerate() {
        if contact.contains(&k) && x == 0.0 {
            binding += 1;
            assert!(multiplier[k] >= -tol);
        } else {
            assert!(multiplier[k].abs() <= tol);
        }
    }
    assert!(binding > 0);

    let energy = |v: &DVector<f64>| 0.5 * v.dot(&(&a * v)) - fv.dot(v);
    let e_star = energy(&uv);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut v = uv.clone();
        for k in 0..v.len() {
            v[k] += rng.gen_range(-0.05..0.05);
        }
        for &k in &contact {
            v[k] = v[k].min(0.0);
        }
        assert!(e_star <= energy(&v) + tol);
    }
}
