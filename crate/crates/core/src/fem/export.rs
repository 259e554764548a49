//! Field snapshot writers.
//!
//! Legacy VTK structured grid (ASCII):
//!
//! ```text
//! # vtk DataFile Version 3.0
//! pilltop format_version=1 step=<n> [note]
//! ASCII
//! DATASET STRUCTURED_GRID
//! DIMENSIONS <nx+1> <ny+1> 1
//! POINTS <n_nodes> double
//! <x> <y> 0            (lexicographic node order)
//! POINT_DATA <n_nodes>
//! SCALARS <name> double 1 / LOOKUP_TABLE default / one value per line
//! CELL_DATA <n_elements>  (only when cell arrays are given)
//! ```
//!
//! CSV: header `x,y,phi,C`, one row per node in lexicographic order.
//!
//! Numbers use Rust's shortest round-trip formatting, so identical inputs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mesh::StructuredMesh;
use super::StateFields;
use crate::error::Result;

pub const FORMAT_VERSION: u32 = 1;

fn scalars(out: &mut String, name: &str, values: &[f64]) {
    let _ = writeln!(out, "SCALARS {name} double 1");
    out.push_str("LOOKUP_TABLE default\n");
    for v in values {
        let _ = writeln!(out, "{v:e}");
    }
}

/// Render a legacy VTK structured-grid document. A non-empty `note` is
/// appended to the title line (kept on one line, at most 256 bytes overall).
pub fn vtk_string(
    mesh: &StructuredMesh,
    step: usize,
    note: &str,
    point_data: &[(&str, &[f64])],
    cell_data: &[(&str, &[f64])],
) -> String {
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let mut title = format!("pilltop format_version={FORMAT_VERSION} step={step}");
    let note = note.replace(['\n', '\r'], " ");
    if !note.is_empty() {
        title.push(' ');
        title.push_str(&note);
    }
    let mut cut = title.len().min(256);
    while !title.is_char_boundary(cut) {
        cut -= 1;
    }
    title.truncate(cut);
    out.push_str(&title);
    out.push('\n');
    out.push_str("ASCII\nDATASET STRUCTURED_GRID\n");
    let _ = writeln!(out, "DIMENSIONS {} {} 1", mesh.nx + 1, mesh.ny + 1);
    let _ = writeln!(out, "POINTS {} double", mesh.n_nodes());
    for p in mesh.nodes() {
        let _ = writeln!(out, "{:e} {:e} 0", p[0], p[1]);
    }
    let _ = writeln!(out, "POINT_DATA {}", mesh.n_nodes());
    for (name, values) in point_data {
        assert_eq!(values.len(), mesh.n_nodes(), "point array {name}");
        scalars(&mut out, name, values);
    }
    if !cell_data.is_empty() {
        let _ = writeln!(out, "CELL_DATA {}", mesh.n_elements());
        for (name, values) in cell_data {
            assert_eq!(values.len(), mesh.n_elements(), "cell array {name}");
            scalars(&mut out, name, values);
        }
    }
    out
}

pub fn write_vtk(
    path: &Path,
    mesh: &StructuredMesh,
    state: &StateFields,
    cell_data: &[(&str, &[f64])],
) -> Result<()> {
    let doc = vtk_string(
        mesh,
        state.step,
        "",
        &[("phi", &state.phi), ("C", &state.c)],
        cell_data,
    );
    fs::write(path, doc)?;
    Ok(())
}

pub fn csv_string(mesh: &StructuredMesh, state: &StateFields) -> String {
    let mut out = String::from("x,y,phi,C\n");
    for (i, p) in mesh.nodes().iter().enumerate() {
        let _ = writeln!(
            out,
            "{:e},{:e},{:e},{:e}",
            p[0], p[1], state.phi[i], state.c[i]
        );
    }
    out
}

pub fn write_csv(path: &Path, mesh: &StructuredMesh, state: &StateFields) -> Result<()> {
    fs::write(path, csv_string(mesh, state))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vtk_layout() {
        let mesh = StructuredMesh::new(2, 2, 1.0, 1.0).unwrap();
        let s = StateFields::uniform(9, 1.0, 0.0);
        let k = vec![2e-4; 4];
        let doc = vtk_string(
            &mesh,
            3,
            "",
            &[("phi", &s.phi), ("C", &s.c)],
            &[("k_field", &k)],
        );
        let lines: Vec<&str> = doc.lines().collect();
        assert_eq!(lines[1], "pilltop format_version=1 step=3");
        assert_eq!(lines[4], "DIMENSIONS 3 3 1");
        assert_eq!(lines[5], "POINTS 9 double");
        assert!(doc.contains("POINT_DATA 9\nSCALARS phi double 1\nLOOKUP_TABLE default\n1e0\n"));
        assert!(doc.contains("CELL_DATA 4\nSCALARS k_field double 1"));
    }

    #[test]
    fn csv_layout() {
        let mesh = StructuredMesh::new(2, 2, 1.0, 1.0).unwrap();
        let s = StateFields::uniform(9, 0.5, 0.0);
        let doc = csv_string(&mesh, &s);
        let lines: Vec<&str> = doc.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "x,y,phi,C");
        assert_eq!(lines[2], "5e-1,0e0,5e-1,0e0");
    }
}
