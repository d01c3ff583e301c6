//! Norms, relative errors, iteration rates and the per-iteration run record.

use std::fmt;
use std::io::Write;

use crate::error::Result;
use crate::sparse::SparseMatrix;

/// A ratio that may have a vanishing denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ratio {
    Value(f64),
    /// Nonzero numerator over a zero denominator.
    Undefined,
}

impl Ratio {
    pub fn new(num: f64, den: f64) -> Self {
        if num == 0.0 {
            Ratio::Value(0.0)
        } else if den == 0.0 {
            Ratio::Undefined
        } else {
            Ratio::Value(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Undefined => None,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Value(v) => write!(f, "{v:e}"),
            Ratio::Undefined => f.write_str("undefined"),
        }
    }
}

/// The bilinear forms used for error measurement: pure stiffness and unweighted mass.
#[derive(Clone, Debug)]
pub struct Forms {
    pub stiffness: SparseMatrix,
    pub mass: SparseMatrix,
}

fn quad_norm(v: &[f64], m: &SparseMatrix) -> f64 {
    let q = m.bilinear(v, v);
    let scale = m.max_abs() * v.iter().map(|x| x * x).sum::<f64>();
    assert!(
        q >= -1e-12 * scale.max(1.0),
        "quadratic form is negative: {q:e}"
    );
    q.max(0.0).sqrt()
}

/// `‖v‖_a = √(vᵀ A v)`.
pub fn energy_norm(v: &[f64], stiffness: &SparseMatrix) -> f64 {
    quad_norm(v, stiffness)
}

/// `‖v‖_{L²} = √(vᵀ M v)`.
pub fn l2_norm(v: &[f64], mass: &SparseMatrix) -> f64 {
    quad_norm(v, mass)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(E_L, E_a)`: errors of `u_cem` relative to `u_fe`.
pub fn relative_errors(u_fe: &[f64], u_cem: &[f64], forms: &Forms) -> (Ratio, Ratio) {
    let d = diff(u_fe, u_cem);
    (
        Ratio::new(l2_norm(&d, &forms.mass), l2_norm(u_fe, &forms.mass)),
        Ratio::new(energy_norm(&d, &forms.stiffness), energy_norm(u_fe, &forms.stiffness)),
    )
}

/// `(T_L, T_a)`: change between consecutive iterates relative to the previous one.
pub fn iteration_rates(u_prev: &[f64], u_curr: &[f64], forms: &Forms) -> (Ratio, Ratio) {
    let d = diff(u_prev, u_curr);
    (
        Ratio::new(l2_norm(&d, &forms.mass), l2_norm(u_prev, &forms.mass)),
        Ratio::new(energy_norm(&d, &forms.stiffness), energy_norm(u_prev, &forms.stiffness)),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordRow {
    pub k: usize,
    pub e_l: Option<Ratio>,
    pub e_a: Option<Ratio>,
    /// Only for `k >= 2`.
    pub t_l: Option<Ratio>,
    pub t_a: Option<Ratio>,
    /// Active contact nodes of the coefficient used to compute iterate `k`.
    pub active: usize,
    pub residual: f64,
    pub phase_ms: Option<f64>,
}

pub const CSV_HEADER: &str = "k,E_L,E_a,T_L,T_a,active,residual,phase_ms";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
}

fn cell<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunRecord {
    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{:e},{}",
                r.k,
                cell(&r.e_l),
                cell(&r.e_a),
                cell(&r.t_l),
                cell(&r.t_a),
                r.active,
                r.residual,
                cell(&r.phase_ms),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_mass, assemble_stiffness};
    use crate::field::PermField;
    use crate::mesh::StructuredMesh;

    fn forms() -> (StructuredMesh, Forms) {
        let mesh = StructuredMesh::new(8, 8, 2, 2).unwrap();
        let field = PermField::constant(&mesh, 1.0);
        let f = Forms {
            stiffness: assemble_stiffness(&mesh, &field),
            mass: assemble_mass(&mesh),
        };
        (mesh, f)
    }

    #[test]
    fn constant_has_zero_energy_unit_l2() {
        let (mesh, f) = forms();
        let one = vec![1.0; mesh.num_nodes()];
        assert!(energy_norm(&one, &f.stiffness) < 1e-7);
        assert!((l2_norm(&one, &f.mass) - 1.0).abs() < 1e-14);
        let zero = vec![0.0; mesh.num_nodes()];
        assert_eq!(energy_norm(&zero, &f.stiffness), 0.0);
    }

    #[test]
    fn ratios() {
        let (mesh, f) = forms();
        let u: Vec<f64> = (0..mesh.num_nodes()).map(|k| (k as f64 * 0.37).sin()).collect();
        let (el, ea) = relative_errors(&u, &u, &f);
        assert_eq!((el, ea), (Ratio::Value(0.0), Ratio::Value(0.0)));
        let twice: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let (el, ea) = relative_errors(&u, &twice, &f);
        assert!((el.value().unwrap() - 1.0).abs() < 1e-12);
        assert!((ea.value().unwrap() - 1.0).abs() < 1e-12);
        let zero = vec![0.0; u.len()];
        assert_eq!(iteration_rates(&zero, &u, &f).0, Ratio::Undefined);
    }

    #[test]
    fn csv_leaves_missing_cells_empty() {
        let rec = RunRecord {
            rows: vec![RecordRow {
                k: 1,
                e_l: Some(Ratio::Value(0.5)),
                e_a: Some(Ratio::Undefined),
                t_l: None,
                t_a: None,
                active: 3,
                residual: 1e-9,
                phase_ms: None,
            }],
        };
        let s = rec.to_csv_string();
        assert_eq!(s, format!("{CSV_HEADER}\n1,5e-1,undefined,,,3,1e-9,\n"));
    }
}
