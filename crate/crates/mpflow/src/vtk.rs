//! Legacy ASCII VTK output: bilinear cells are written as VTK_QUAD (9),
//! biquadratic geometry as VTK_BIQUADRATIC_QUAD (28). Fields are sampled at
//! the mesh nodes.

use std::io::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::mesh::Mesh;
use crate::reference;
use crate::space::Space;

/// Sample a scalar finite-element field at every mesh node.
pub fn sample_scalar_at_nodes(mesh: &Mesh, space: &Space, coeffs: &[f64]) -> Vec<f64> {
    let ref_nodes = reference::node_coords(mesh.geometric_degree);
    let mut out = vec![0.0; mesh.nodes.len()];
    for (e, elem) in mesh.elements.iter().enumerate() {
        for (ln, &node) in elem.iter().enumerate() {
            let vals = reference::shape_values(space.degree, ref_nodes[ln]);
            let mut v = 0.0;
            for (j, &dof) in space.elem_dofs[e].iter().enumerate() {
                v += coeffs[dof] * vals[j];
            }
            out[node] = v;
        }
    }
    out
}

/// Sample a component-blocked vector field at every mesh node.
pub fn sample_vector_at_nodes(mesh: &Mesh, space: &Space, coeffs: &[f64]) -> Vec<[f64; 2]> {
    let n = space.n_dofs;
    let x = sample_scalar_at_nodes(mesh, space, &coeffs[..n]);
    let y = sample_scalar_at_nodes(mesh, space, &coeffs[n..]);
    x.into_iter().zip(y).map(|(a, b)| [a, b]).collect()
}

/// Write a legacy ASCII VTK file with nodal point data.
pub fn write_legacy_vtk(
    path: &Path,
    mesh: &Mesh,
    scalars: &[(&str, &[f64])],
    vectors: &[(&str, &[[f64; 2]])],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# vtk DataFile Version 3.0")?;
    writeln!(f, "dispersed multiphase flow snapshot")?;
    writeln!(f, "ASCII")?;
    writeln!(f, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(f, "POINTS {} double", mesh.nodes.len())?;
    for p in &mesh.nodes {
        writeln!(f, "{:.12e} {:.12e} 0.0", p[0], p[1])?;
    }
    let npe = mesh.elements[0].len();
    writeln!(f, "CELLS {} {}", mesh.elements.len(), mesh.elements.len() * (npe + 1))?;
    for elem in &mesh.elements {
        write!(f, "{npe}")?;
        for &n in elem {
            write!(f, " {n}")?;
        }
        writeln!(f)?;
    }
    let cell_type = if npe == 4 { 9 } else { 28 };
    writeln!(f, "CELL_TYPES {}", mesh.elements.len())?;
    for _ in &mesh.elements {
        writeln!(f, "{cell_type}")?;
    }
    writeln!(f, "POINT_DATA {}", mesh.nodes.len())?;
    for (name, vals) in scalars {
        writeln!(f, "SCALARS {name} double 1")?;
        writeln!(f, "LOOKUP_TABLE default")?;
        for v in *vals {
            writeln!(f, "{v:.12e}")?;
        }
    }
    for (name, vals) in vectors {
        writeln!(f, "VECTORS {name} double")?;
        for v in *vals {
            writeln!(f, "{:.12e} {:.12e} 0.0", v[0], v[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;
    use std::sync::Arc;

    #[test]
    fn writes_quads_and_point_data() {
        let m = Arc::new(
            mesh::build_rectangle(2, 2, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let sp = Space::new(m.clone(), 1).unwrap();
        let coeffs = sp.interpolate(|x| x[0] + 2.0 * x[1]);
        let vals = sample_scalar_at_nodes(&m, &sp, &coeffs);
        for (n, p) in m.nodes.iter().enumerate() {
            assert!((vals[n] - (p[0] + 2.0 * p[1])).abs() < 1e-13);
        }
        let vec_coeffs = sp.interpolate_vector(|x| [x[1], -x[0]]);
        let vecs = sample_vector_at_nodes(&m, &sp, &vec_coeffs);
        let dir = std::env::temp_dir().join("mpflow-vtk-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.vtk");
        write_legacy_vtk(&path, &m, &[("alpha", &vals)], &[("velocity", &vecs)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("DATASET UNSTRUCTURED_GRID"));
        assert!(text.lines().filter(|l| *l == "9").count() >= 4);
        assert!(text.contains("SCALARS alpha double 1"));
        assert!(text.contains("VECTORS velocity double"));
    }

    #[test]
    fn biquadratic_cells_use_type_28() {
        let m = Arc::new(mesh::build_disk(2, 2, 1.0).unwrap());
        let sp = Space::new(m.clone(), 2).unwrap();
        let coeffs = sp.interpolate(|x| x[0] * x[1]);
        let vals = sample_scalar_at_nodes(&m, &sp, &coeffs);
        for (n, p) in m.nodes.iter().enumerate() {
            assert!((vals[n] - p[0] * p[1]).abs() < 1e-12);
        }
        let dir = std::env::temp_dir().join("mpflow-vtk-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("disk.vtk");
        write_legacy_vtk(&path, &m, &[("f", &vals)], &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().filter(|l| *l == "28").count() == m.elements.len());
    }
}
