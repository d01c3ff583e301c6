//! Penalized contact: active sets, the penalty functional and residual, the fine-grid
//! semismooth Newton iteration in Robin form, and the iterative multiscale driver.
//!
//! Each outer step solves
//!
//! ```text
//! (A + (1/ε) T 𝟙(u_k > 0)) u_{k+1} = F
//! ```
//!
//! where `T` is the lumped contact trace. On a domain without Dirichlet boundary the
//! system is singular while the active set is empty; the load is then replaced by its
//! compatible part and the solution normalized to zero mean.

use std::time::Instant;

use crate::cem::{CemConfig, CemSolver};
use crate::error::{Error, Result};
use crate::fem::{
    apply_dirichlet, assemble_load, assemble_mass, assemble_neumann_load, assemble_stiffness,
    contact_weights, NeumannData, Source,
};
use crate::field::{PermField, SpectralWeight};
use crate::linsolve::{solve_spd, SolverOptions};
use crate::mesh::{BoundaryKind, BoundarySpec, StructuredMesh};
use crate::metrics::{energy_norm, iteration_rates, relative_errors, Forms, RecordRow, RunRecord};
use crate::sparse::norm2;

/// Which contact nodes are active (`u_j > 0`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    nodes: Vec<usize>,
    active: Vec<bool>,
}

impl ActiveSet {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .zip(&self.active)
            .filter_map(|(&n, &a)| a.then_some(n))
    }

    /// Robin coefficient `b = (1/ε) 𝟙(active)` as a global nodal vector.
    pub fn bvals(&self, eps: f64, num_nodes: usize) -> Vec<f64> {
        let mut b = vec![0.0; num_nodes];
        for n in self.active_nodes() {
            b[n] = 1.0 / eps;
        }
        b
    }
}

/// `g'(u) = 𝟙(u > 0)` on the contact nodes; ties are inactive.
pub fn indicator(u: &[f64], spec: &BoundarySpec) -> ActiveSet {
    let nodes = spec.nodes_of(BoundaryKind::Contact);
    let active = nodes.iter().map(|&n| u[n] > 0.0).collect();
    ActiveSet { nodes, active }
}

/// Built-in initial guesses (nodal interpolants, zeroed on the Dirichlet boundary).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitialGuess {
    /// `u = 0`
    Zero,
    /// `u = -x - y`
    Linear,
    /// `u = -x²/2 - y²/2`
    Quadratic,
}

pub fn initial_guess(kind: InitialGuess, mesh: &StructuredMesh, spec: &BoundarySpec) -> Vec<f64> {
    (0..mesh.num_nodes())
        .map(|n| {
            if spec.is_dirichlet(n) {
                return 0.0;
            }
            let (x, y) = mesh.node_coords(n);
            match kind {
                InitialGuess::Zero => 0.0,
                InitialGuess::Linear => -x - y,
                InitialGuess::Quadratic => -0.5 * x * x - 0.5 * y * y,
            }
        })
        .collect()
}

/// Everything assembled once per problem instance.
#[derive(Clone, Debug)]
pub struct ContactProblem {
    pub mesh: StructuredMesh,
    pub spec: BoundarySpec,
    pub field: PermField,
    pub neumann: NeumannData,
    pub forms: Forms,
    /// `∫ f v + ∫_{Γ_N} p v`.
    pub load: Vec<f64>,
    /// Lumped weights of the full contact trace.
    pub trace_weights: Vec<f64>,
    pub dirichlet: Vec<bool>,
    /// `M 1`, used for compatibility projections and mean normalization.
    pub nodal_area: Vec<f64>,
}

impl ContactProblem {
    pub fn new(
        mesh: StructuredMesh,
        spec: BoundarySpec,
        field: PermField,
        source: &Source,
        neumann: NeumannData,
    ) -> Self {
        let stiffness = assemble_stiffness(&mesh, &field);
        let mass = assemble_mass(&mesh);
        let mut load = assemble_load(&mesh, source);
        let p = assemble_neumann_load(&mesh, &spec, &neumann, |_| true);
        load.iter_mut().zip(&p).for_each(|(l, q)| *l += q);
        let trace_weights = contact_weights(&mesh, spec.edges());
        let dirichlet = spec.dirichlet_mask();
        let nodal_area = mass.mul_vec(&vec![1.0; mesh.num_nodes()]);
        Self {
            mesh,
            spec,
            field,
            neumann,
            forms: Forms { stiffness, mass },
            load,
            trace_weights,
            dirichlet,
            nodal_area,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    /// True when the Robin system for `active` has the constants in its kernel.
    pub fn is_floating(&self, active: &ActiveSet) -> bool {
        !self.spec.has_dirichlet() && active.count() == 0
    }

    /// Solves `(A + (1/ε) T(active)) u = F` on the fine grid.
    pub fn robin_solve(&self, active: &ActiveSet, eps: f64, opts: &SolverOptions) -> Result<Vec<f64>> {
        let n = self.num_nodes();
        let b = active.bvals(eps, n);
        let trace: Vec<f64> = self.trace_weights.iter().zip(&b).map(|(w, b)| w * b).collect();
        let k = self.forms.stiffness.add_diagonal(&trace);
        let floating = self.is_floating(active);
        let mut fixed = self.dirichlet.clone();
        let mut load = self.load.clone();
        if floating {
            self.project_compatible(&mut load);
            fixed[0] = true;
        }
        let (k, f) = apply_dirichlet(&k, &load, &fixed);
        let (mut u, _) = solve_spd(&k, &f, opts)?;
        if floating {
            self.remove_mean(&mut u);
        }
        Ok(u)
    }

    fn project_compatible(&self, load: &mut [f64]) {
        let total: f64 = load.iter().sum();
        let area: f64 = self.nodal_area.iter().sum();
        load.iter_mut()
            .zip(&self.nodal_area)
            .for_each(|(l, a)| *l -= total / area * a);
    }

    fn remove_mean(&self, u: &mut [f64]) {
        let area: f64 = self.nodal_area.iter().sum();
        let mean = u.iter().zip(&self.nodal_area).map(|(x, a)| x * a).sum::<f64>() / area;
        u.iter_mut().for_each(|x| *x -= mean);
    }

    /// The multiscale solver for this problem.
    pub fn cem_solver<'a>(&'a self, weight: &'a SpectralWeight, config: CemConfig) -> Result<CemSolver<'a>> {
        CemSolver::new(
            &self.mesh,
            &self.spec,
            &self.field,
            weight,
            config,
            &self.forms.stiffness,
            &self.load,
            self.neumann.clone(),
            self.nodal_area.clone(),
        )
    }
}

/// `F_ε(u) = ½ a(u,u) − L(u) + (1/ε) ½ ∫_{Γ_C} u_+²` with the lumped trace rule.
pub fn penalty_energy(u: &[f64], eps: f64, problem: &ContactProblem) -> f64 {
    let a = 0.5 * problem.forms.stiffness.bilinear(u, u);
    let l: f64 = u.iter().zip(&problem.load).map(|(x, f)| x * f).sum();
    let p: f64 = u
        .iter()
        .zip(&problem.trace_weights)
        .map(|(x, w)| w * x.max(0.0).powi(2))
        .sum();
    a - l + 0.5 * p / eps
}

/// `‖A u + (1/ε) T u_+ − F‖₂` over the non-Dirichlet nodes.
pub fn residual_vector(u: &[f64], eps: f64, problem: &ContactProblem) -> Vec<f64> {
    let au = problem.forms.stiffness.mul_vec(u);
    (0..u.len())
        .map(|j| {
            if problem.dirichlet[j] {
                0.0
            } else {
                au[j] + problem.trace_weights[j] * u[j].max(0.0) / eps - problem.load[j]
            }
        })
        .collect()
}

pub fn residual_norm(u: &[f64], eps: f64, problem: &ContactProblem) -> f64 {
    norm2(&residual_vector(u, eps, problem))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub eps: f64,
    /// Absolute tolerance on `‖u_k − u_{k−1}‖_a`.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: SolverOptions,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-8,
            max_iter: 50,
            solver: SolverOptions::default(),
        }
    }
}

/// All iterates `u_0, …, u_K` of an outer iteration with its record.
#[derive(Clone, Debug)]
pub struct IterationRun {
    pub iterates: Vec<Vec<f64>>,
    /// `active_sets[k-1]` defines the coefficient used for iterate `k`.
    pub active_sets: Vec<ActiveSet>,
    pub record: RunRecord,
    /// Milliseconds per outer iteration.
    pub timings: Vec<f64>,
}

impl IterationRun {
    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("run holds its initial guess")
    }

    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Iterate `k`, or the last one if the run stopped earlier.
    pub fn iterate_or_last(&self, k: usize) -> &[f64] {
        &self.iterates[k.min(self.iterates.len() - 1)]
    }
}

/// Shared outer loop. `step` computes `u_{k}` from the active set of `u_{k−1}`;
/// `reference` supplies the paired fine iterate for the error columns.
fn outer_loop(
    problem: &ContactProblem,
    u0: &[f64],
    opts: &NewtonOptions,
    reference: Option<&IterationRun>,
    mut step: impl FnMut(&ActiveSet) -> Result<Vec<f64>>,
) -> Result<IterationRun> {
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("penalty parameter must be positive, got {}", opts.eps)));
    }
    let mut run = IterationRun {
        iterates: vec![u0.to_vec()],
        active_sets: Vec::new(),
        record: RunRecord::default(),
        timings: Vec::new(),
    };
    let forms = &problem.forms;
    for k in 1..=opts.max_iter {
        let start = Instant::now();
        let prev = run.last().to_vec();
        let active = indicator(&prev, &problem.spec);
        let u = step(&active)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;

        let (e_l, e_a) = match reference {
            Some(r) => {
                let (l, a) = relative_errors(r.iterate_or_last(k), &u, forms);
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let (t_l, t_a) = if k >= 2 {
            let (l, a) = iteration_rates(&prev, &u, forms);
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        let change: Vec<f64> = u.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let update = energy_norm(&change, &forms.stiffness);
        let repeated = run.active_sets.last() == Some(&active);
        run.record.rows.push(RecordRow {
            k,
            e_l,
            e_a,
            t_l,
            t_a,
            active: active.count(),
            residual: residual_norm(&u, opts.eps, problem),
            phase_ms: None,
        });
        run.timings.push(ms);
        run.active_sets.push(active);
        run.iterates.push(u);
        log::debug!("outer iteration {k}: update {update:e}, repeated active set: {repeated}");
        if update <= opts.tol || repeated {
            return Ok(run);
        }
        if k == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: k,
                last_update: update,
                record: Box::new(run.record),
            });
        }
    }
    // max_iter == 0
    Err(Error::NonConvergence {
        iterations: 0,
        last_update: f64::INFINITY,
        record: Box::new(run.record),
    })
}

/// Fine-grid semismooth Newton iteration in Robin form.
pub fn fine_newton_solve(problem: &ContactProblem, u0: &[f64], opts: &NewtonOptions) -> Result<IterationRun> {
    outer_loop(problem, u0, opts, None, |active| {
        problem.robin_solve(active, opts.eps, &opts.solver)
    })
}

/// Iterative multiscale solve. When `reference` holds the fine run from the same initial
/// guess, the record carries the paired relative errors.
pub fn iterative_cem_solve(
    problem: &ContactProblem,
    solver: &mut CemSolver<'_>,
    u0: &[f64],
    opts: &NewtonOptions,
    reference: Option<&IterationRun>,
) -> Result<IterationRun> {
    let n = problem.num_nodes();
    outer_loop(problem, u0, opts, reference, |active| {
        let step = solver.solve(&active.bvals(opts.eps, n))?;
        log::debug!(
            "multiscale step: {} elements rebuilt, coarse dimension {}",
            step.rebuilt.len(),
            step.coarse_dim
        );
        Ok(step.u)
    })
}
