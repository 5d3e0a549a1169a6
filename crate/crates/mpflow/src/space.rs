//! Scalar Lagrange finite-element spaces (degree 1 or 2) on quad meshes.
//!
//! Vector-valued fields reuse a scalar space with component-blocked
//! coefficients: component c of dof i lives at index `c * n_dofs + i`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::reference;

#[derive(Debug, Clone)]
pub struct Space {
    pub mesh: Arc<Mesh>,
    pub degree: usize,
    /// Global dof ids per element, in reference local ordering.
    pub elem_dofs: Vec<Vec<usize>>,
    pub n_dofs: usize,
    /// Physical coordinates of each dof (its interpolation node).
    pub dof_coords: Vec<[f64; 2]>,
}

impl Space {
    pub fn new(mesh: Arc<Mesh>, degree: usize) -> Result<Self> {
        if !(degree == 1 || degree == 2) {
            return Err(Error::InvalidInput(format!(
                "unsupported finite-element degree {degree}"
            )));
        }
        let mut vertex_dof: HashMap<usize, usize> = HashMap::new();
        let mut edge_dof: HashMap<(usize, usize), usize> = HashMap::new();
        let mut n_dofs = 0usize;
        let mut elem_dofs = Vec::with_capacity(mesh.n_elements());
        let mut dof_ref: Vec<(usize, [f64; 2])> = Vec::new(); // (element, ref point) per dof
        let ref_coords = reference::node_coords(degree);
        for (e, el) in mesh.elements.iter().enumerate() {
            let mut dofs = Vec::with_capacity(reference::node_count(degree));
            for v in 0..4 {
                let d = *vertex_dof.entry(el[v]).or_insert_with(|| {
                    let d = n_dofs;
                    n_dofs += 1;
                    dof_ref.push((e, ref_coords[v]));
                    d
                });
                dofs.push(d);
            }
            if degree == 2 {
                for le in 0..4 {
                    let [a, b] = reference::EDGE_CORNERS[le];
                    let mut key = (el[a], el[b]);
                    if key.0 > key.1 {
                        key = (key.1, key.0);
                    }
                    let d = *edge_dof.entry(key).or_insert_with(|| {
                        let d = n_dofs;
                        n_dofs += 1;
                        dof_ref.push((e, ref_coords[4 + le]));
                        d
                    });
                    dofs.push(d);
                }
                dofs.push(n_dofs);
                dof_ref.push((e, ref_coords[8]));
                n_dofs += 1;
            }
            elem_dofs.push(dofs);
        }
        let dof_coords = dof_ref
            .iter()
            .map(|&(e, p)| mesh.map_point(e, p))
            .collect();
        Ok(Space { mesh, degree, elem_dofs, n_dofs, dof_coords })
    }

    pub fn local_size(&self) -> usize {
        reference::node_count(self.degree)
    }

    /// Sorted, deduplicated dof ids lying on boundary facets with one of the
    /// given markers.
    pub fn boundary_dofs(&self, markers: &[&str]) -> Vec<usize> {
        let mut out = Vec::new();
        for f in &self.mesh.boundary_facets {
            if !markers.contains(&f.marker.as_str()) {
                continue;
            }
            for ln in reference::edge_nodes(self.degree, f.local_edge) {
                out.push(self.elem_dofs[f.element][ln]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Nodal interpolation of a scalar function.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.dof_coords.iter().map(|&x| f(x)).collect()
    }

    /// Nodal interpolation of a vector function into component-blocked
    /// coefficients of length `2 * n_dofs`.
    pub fn interpolate_vector(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n_dofs];
        for (i, &x) in self.dof_coords.iter().enumerate() {
            let v = f(x);
            out[i] = v[0];
            out[self.n_dofs + i] = v[1];
        }
        out
    }
}
