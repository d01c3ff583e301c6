//! Permeability fields and the spectral weight used by the local eigenproblems.

use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::StructuredMesh;

/// Piecewise-constant permeability, one value per fine cell (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PermField {
    values: Vec<f64>,
    kappa_m: f64,
    kappa_i: f64,
}

impl PermField {
    pub fn constant(mesh: &StructuredMesh, value: f64) -> Self {
        Self {
            values: vec![value; mesh.num_cells()],
            kappa_m: value,
            kappa_i: value,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    /// Background (matrix) value.
    pub fn kappa_m(&self) -> f64 {
        self.kappa_m
    }

    /// Inclusion/channel value.
    pub fn kappa_i(&self) -> f64 {
        self.kappa_i
    }

    pub fn kappa_r(&self) -> f64 {
        self.kappa_i / self.kappa_m
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            kappa_m: self.kappa_m * c,
            kappa_i: self.kappa_i * c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MediumKind {
    /// Small rectangular inclusions scattered over the domain.
    Inclusions,
    /// Long thin horizontal and vertical strips.
    Channels,
    /// Inclusions and channels together.
    MixedC,
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }
}

const INCLUSION_SIDE: (f64, f64) = (0.02, 0.06);
const CHANNEL_WIDTH: (f64, f64) = (0.01, 0.02);
const CHANNEL_LENGTH: (f64, f64) = (0.5, 0.9);

fn inclusions(rng: &mut ChaCha8Rng, count: usize) -> Vec<Rect> {
    (0..count)
        .map(|_| {
            let w = rng.gen_range(INCLUSION_SIDE.0..INCLUSION_SIDE.1);
            let h = rng.gen_range(INCLUSION_SIDE.0..INCLUSION_SIDE.1);
            let x0 = rng.gen_range(0.0..1.0 - w);
            let y0 = rng.gen_range(0.0..1.0 - h);
            Rect {
                x0,
                x1: x0 + w,
                y0,
                y1: y0 + h,
            }
        })
        .collect()
}

fn channels(rng: &mut ChaCha8Rng, count: usize) -> Vec<Rect> {
    (0..count)
        .map(|k| {
            let width = rng.gen_range(CHANNEL_WIDTH.0..CHANNEL_WIDTH.1);
            let len = rng.gen_range(CHANNEL_LENGTH.0..CHANNEL_LENGTH.1);
            let start = rng.gen_range(0.0..1.0 - len);
            let offset = rng.gen_range(0.05..0.95 - width);
            if k % 2 == 0 {
                Rect {
                    x0: start,
                    x1: start + len,
                    y0: offset,
                    y1: offset + width,
                }
            } else {
                Rect {
                    x0: offset,
                    x1: offset + width,
                    y0: start,
                    y1: start + len,
                }
            }
        })
        .collect()
}

/// Seeded binary medium with background 1 and high-value phase `kappa_r`.
///
/// Shapes are drawn in physical coordinates and rasterized at cell centers, so the
/// same seed gives the same geometry at every resolution.
pub fn synth_medium(
    kind: MediumKind,
    seed: u64,
    kappa_r: f64,
    mesh: &StructuredMesh,
) -> Result<PermField> {
    if !(kappa_r >= 1.0) {
        return Err(Error::Config(format!("contrast ratio must be >= 1, got {kappa_r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = match kind {
        MediumKind::Inclusions => inclusions(&mut rng, 60),
        MediumKind::Channels => channels(&mut rng, 6),
        MediumKind::MixedC => {
            let mut s = channels(&mut rng, 4);
            s.extend(inclusions(&mut rng, 30));
            s
        }
    };
    let values = (0..mesh.num_cells())
        .map(|c| {
            let (x, y) = mesh.cell_center(c);
            if shapes.iter().any(|r| r.contains(x, y)) {
                kappa_r
            } else {
                1.0
            }
        })
        .collect();
    Ok(PermField {
        values,
        kappa_m: 1.0,
        kappa_i: kappa_r,
    })
}

/// Wraps a table of cell values; `rows[j][i]` is cell `(i, j)` with `j` counted from the bottom.
pub fn load_field(rows: &[Vec<f64>], mesh: &StructuredMesh) -> Result<PermField> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.len() != mesh.ny() || rows.iter().any(|r| r.len() != mesh.nx()) {
        return Err(Error::Dimension {
            expected_cols: mesh.nx(),
            expected_rows: mesh.ny(),
            cols,
            rows: rows.len(),
        });
    }
    let values: Vec<f64> = rows.iter().flatten().copied().collect();
    from_values(values, mesh)
}

/// Like [`load_field`] for a flat row-major vector.
pub fn from_values(values: Vec<f64>, mesh: &StructuredMesh) -> Result<PermField> {
    if values.len() != mesh.num_cells() {
        return Err(Error::Dimension {
            expected_cols: mesh.nx(),
            expected_rows: mesh.ny(),
            cols: values.len(),
            rows: 1,
        });
    }
    if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonpositivePermeability { cell, value });
    }
    let kappa_m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let kappa_i = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PermField {
        values,
        kappa_m,
        kappa_i,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// `24 κ / H²`.
    #[default]
    Simplified,
    /// `3 Σ_j κ ∇η_j·∇η_j` with the coarse bilinear bases, evaluated at fine cell centers.
    LagrangeSum,
}

/// Per-fine-cell weight `κ̃` of the auxiliary inner product.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralWeight {
    values: Vec<f64>,
}

impl SpectralWeight {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }
}

pub fn spectral_weight(field: &PermField, mesh: &StructuredMesh, mode: WeightMode) -> SpectralWeight {
    let (hx, hy) = (mesh.coarse_hx(), mesh.coarse_hy());
    let values = match mode {
        WeightMode::Simplified => {
            let c = 24.0 / (hx * hy);
            field.values.iter().map(|k| c * k).collect()
        }
        WeightMode::LagrangeSum => (0..mesh.num_cells())
            .map(|c| {
                let (x, y) = mesh.cell_center(c);
                let (ci, cj) = mesh.coarse_ij(mesh.coarse_of_cell(c));
                let xi = x / hx - ci as f64;
                let eta = y / hy - cj as f64;
                // Σ_j |∇η_j|² for the four bilinear bases on the coarse element.
                let grad_sq = 2.0 * ((1.0 - eta).powi(2) + eta * eta) / (hx * hx)
                    + 2.0 * ((1.0 - xi).powi(2) + xi * xi) / (hy * hy);
                3.0 * field.values[c] * grad_sq
            })
            .collect(),
    };
    SpectralWeight { values }
}

/// Writes a row-major grid as a 16-byte header (two little-endian `u64` counts,
/// columns then rows) followed by little-endian `f64` values.
pub fn write_grid_bin<W: Write>(mut w: W, cols: usize, rows: usize, values: &[f64]) -> Result<()> {
    if values.len() != cols * rows {
        return Err(Error::Dimension {
            expected_cols: cols,
            expected_rows: rows,
            cols: values.len(),
            rows: 1,
        });
    }
    w.write_all(&(cols as u64).to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid_bin<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let cols = u64::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let rows = u64::from_le_bytes(buf) as usize;
    let mut values = Vec::with_capacity(cols * rows);
    for _ in 0..cols * rows {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok((cols, rows, values))
}

/// One line per grid row, comma separated, shortest round-trip formatting.
pub fn write_grid_csv<W: Write>(mut w: W, cols: usize, values: &[f64]) -> Result<()> {
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_grid_csv<R: BufRead>(r: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
