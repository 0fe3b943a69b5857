//! Field and report output: legacy-ASCII VTK unstructured grids over a
//! sample lattice, plus deterministic CSV tables.
//!
//! The writers format every float with [`fmt_sci`], so identical data
//! produces byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("vtk parse: {0}")]
    Parse(String),
    #[error("sample count {got} does not match lattice {expect}")]
    SampleCount { got: usize, expect: usize },
}

/// One sampled field point.
#[derive(Clone, Copy, Debug)]
pub struct FieldSample {
    /// Reference position, mm.
    pub x: [f64; 3],
    /// Displacement, mm.
    pub u: [f64; 3],
    /// Von Mises stress of the Cauchy stress, MPa.
    pub von_mises_mpa: f64,
    /// Frobenius norm of the hyperstress, MPa mm.
    pub hyperstress_mpa_mm: f64,
}

/// 13-significant-digit scientific notation; enough to reproduce an `f64`
/// to 1e-12 relative and stable across runs.
pub fn fmt_sci(v: f64) -> String {
    format!("{:.12e}", v)
}

/// Uniform parametric sample lattice: `samples` sub-intervals per element
/// give `elements * samples + 1` points per direction, shared across
/// element boundaries.  Returns the point dimensions and the parametric
/// coordinates ordered with the first direction fastest.
pub fn param_lattice(elements: [usize; 3], samples: usize) -> ([usize; 3], Vec<[f64; 3]>) {
    let dims = [
        elements[0] * samples + 1,
        elements[1] * samples + 1,
        elements[2] * samples + 1,
    ];
    let mut xi = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                xi.push([
                    i as f64 / (dims[0] - 1) as f64,
                    j as f64 / (dims[1] - 1) as f64,
                    k as f64 / (dims[2] - 1) as f64,
                ]);
            }
        }
    }
    (dims, xi)
}

/// Write the samples as a legacy-ASCII VTK unstructured grid of hexahedra
/// over the lattice, with point data `displacement_mm`, `von_mises_mpa`
/// and `hyperstress_mpa_mm`.
pub fn write_vtk(
    path: &Path,
    title: &str,
    dims: [usize; 3],
    samples: &[FieldSample],
) -> Result<(), ExportError> {
    let n = dims[0] * dims[1] * dims[2];
    if samples.len() != n {
        return Err(ExportError::SampleCount { got: samples.len(), expect: n });
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);

    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{title}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;

    writeln!(w, "POINTS {n} double")?;
    for s in samples {
        writeln!(w, "{} {} {}", fmt_sci(s.x[0]), fmt_sci(s.x[1]), fmt_sci(s.x[2]))?;
    }

    let nc = [dims[0] - 1, dims[1] - 1, dims[2] - 1];
    let ncells = nc[0] * nc[1] * nc[2];
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    writeln!(w, "CELLS {ncells} {}", 9 * ncells)?;
    for k in 0..nc[2] {
        for j in 0..nc[1] {
            for i in 0..nc[0] {
                writeln!(
                    w,
                    "8 {} {} {} {} {} {} {} {}",
                    idx(i, j, k),
                    idx(i + 1, j, k),
                    idx(i + 1, j + 1, k),
                    idx(i, j + 1, k),
                    idx(i, j, k + 1),
                    idx(i + 1, j, k + 1),
                    idx(i + 1, j + 1, k + 1),
                    idx(i, j + 1, k + 1),
                )?;
            }
        }
    }
    writeln!(w, "CELL_TYPES {ncells}")?;
    for _ in 0..ncells {
        writeln!(w, "12")?;
    }

    writeln!(w, "POINT_DATA {n}")?;
    writeln!(w, "VECTORS displacement_mm double")?;
    for s in samples {
        writeln!(w, "{} {} {}", fmt_sci(s.u[0]), fmt_sci(s.u[1]), fmt_sci(s.u[2]))?;
    }
    writeln!(w, "SCALARS von_mises_mpa double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for s in samples {
        writeln!(w, "{}", fmt_sci(s.von_mises_mpa))?;
    }
    writeln!(w, "SCALARS hyperstress_mpa_mm double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for s in samples {
        writeln!(w, "{}", fmt_sci(s.hyperstress_mpa_mm))?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal parse of the files [`write_vtk`] produces, for round-trip
/// checks and downstream tooling tests.
#[derive(Clone, Debug, Default)]
pub struct ParsedVtk {
    pub points: Vec<[f64; 3]>,
    /// Point data arrays by name, flattened (3 entries per point for
    /// vectors, 1 for scalars).
    pub point_data: Vec<(String, Vec<f64>)>,
}

pub fn read_vtk(path: &Path) -> Result<ParsedVtk, ExportError> {
    let text = std::fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace().peekable();
    let mut out = ParsedVtk::default();

    fn take_f64<'a>(
        tokens: &mut impl Iterator<Item = &'a str>,
        what: &str,
    ) -> Result<f64, ExportError> {
        tokens
            .next()
            .ok_or_else(|| ExportError::Parse(format!("unexpected end in {what}")))?
            .parse()
            .map_err(|e| ExportError::Parse(format!("{what}: {e}")))
    }
    fn take_usize<'a>(
        tokens: &mut impl Iterator<Item = &'a str>,
        what: &str,
    ) -> Result<usize, ExportError> {
        tokens
            .next()
            .ok_or_else(|| ExportError::Parse(format!("unexpected end in {what}")))?
            .parse()
            .map_err(|e| ExportError::Parse(format!("{what}: {e}")))
    }

    let mut n_points = 0usize;
    while let Some(&tok) = tokens.peek() {
        match tok {
            "POINTS" => {
                tokens.next();
                n_points = take_usize(&mut tokens, "POINTS count")?;
                tokens.next(); // value type
                for _ in 0..n_points {
                    let x = take_f64(&mut tokens, "point")?;
                    let y = take_f64(&mut tokens, "point")?;
                    let z = take_f64(&mut tokens, "point")?;
                    out.points.push([x, y, z]);
                }
            }
            "CELLS" => {
                tokens.next();
                let _ncells = take_usize(&mut tokens, "CELLS count")?;
                let total = take_usize(&mut tokens, "CELLS size")?;
                for _ in 0..total {
                    take_usize(&mut tokens, "cell index")?;
                }
            }
            "CELL_TYPES" => {
                tokens.next();
                let ncells = take_usize(&mut tokens, "CELL_TYPES count")?;
                for _ in 0..ncells {
                    take_usize(&mut tokens, "cell type")?;
                }
            }
            "POINT_DATA" => {
                tokens.next();
                let n = take_usize(&mut tokens, "POINT_DATA count")?;
                if n != n_points {
                    return Err(ExportError::Parse(format!(
                        "POINT_DATA count {n} != POINTS count {n_points}"
                    )));
                }
            }
            "VECTORS" => {
                tokens.next();
                let name = tokens
                    .next()
                    .ok_or_else(|| ExportError::Parse("VECTORS name".into()))?
                    .to_string();
                tokens.next(); // value type
                let mut data = Vec::with_capacity(3 * n_points);
                for _ in 0..3 * n_points {
                    data.push(take_f64(&mut tokens, "vector entry")?);
                }
                out.point_data.push((name, data));
            }
            "SCALARS" => {
                tokens.next();
                let name = tokens
                    .next()
                    .ok_or_else(|| ExportError::Parse("SCALARS name".into()))?
                    .to_string();
                tokens.next(); // value type
                let ncomp = take_usize(&mut tokens, "SCALARS components")?;
                let lookup = tokens.next();
                if lookup != Some("LOOKUP_TABLE") {
                    return Err(ExportError::Parse("expected LOOKUP_TABLE".into()));
                }
                tokens.next(); // table name
                let mut data = Vec::with_capacity(ncomp * n_points);
                for _ in 0..ncomp * n_points {
                    data.push(take_f64(&mut tokens, "scalar entry")?);
                }
                out.point_data.push((name, data));
            }
            _ => {
                tokens.next();
            }
        }
    }
    Ok(out)
}

/// Write a CSV table; the caller pre-formats every cell (numeric cells
/// through [`fmt_sci`]) so output is deterministic.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ExportError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
