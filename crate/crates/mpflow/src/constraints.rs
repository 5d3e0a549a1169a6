//! Strong Dirichlet constraints with symmetric elimination.

use crate::error::{Error, Result};
use crate::space::Space;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    /// Sorted unique constrained dof ids.
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
}

impl ConstraintSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        let (dofs, values) = pairs.into_iter().unzip();
        ConstraintSet { dofs, values }
    }

    /// Constrain all dofs on facets with the given markers to g(x).
    pub fn from_marker(space: &Space, markers: &[&str], g: impl Fn([f64; 2]) -> f64) -> Self {
        let pairs = space
            .boundary_dofs(markers)
            .into_iter()
            .map(|d| (d, g(space.dof_coords[d])))
            .collect();
        Self::from_pairs(pairs)
    }

    /// Merge two sets; on overlap the values must agree.
    pub fn merged(&self, other: &ConstraintSet) -> Result<ConstraintSet> {
        let mut pairs: Vec<(usize, f64)> = self
            .dofs
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .chain(other.dofs.iter().copied().zip(other.values.iter().copied()))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 && (w[0].1 - w[1].1).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "conflicting Dirichlet values {} and {} at dof {}",
                    w[0].1, w[1].1, w[0].0
                )));
            }
        }
        pairs.dedup_by_key(|p| p.0);
        let (dofs, values) = pairs.into_iter().unzip();
        Ok(ConstraintSet { dofs, values })
    }

    fn mask(&self, n: usize) -> (Vec<bool>, Vec<f64>) {
        let mut is = vec![false; n];
        let mut val = vec![0.0; n];
        for (&d, &v) in self.dofs.iter().zip(&self.values) {
            is[d] = true;
            val[d] = v;
        }
        (is, val)
    }

    /// Set constrained entries of a coefficient vector to their values.
    pub fn apply_to_vector(&self, v: &mut [f64]) {
        for (&d, &g) in self.dofs.iter().zip(&self.values) {
            v[d] = g;
        }
    }
}

/// Eliminate Dirichlet dofs symmetrically: lift known values to the right
/// hand side, zero the constrained rows and columns and put 1 on the
/// diagonal. Keeps symmetric matrices symmetric.
pub fn apply_constraints(a: &mut CsrMatrix, b: &mut [f64], cs: &ConstraintSet) {
    if cs.is_empty() {
        return;
    }
    let (is_c, g) = cs.mask(a.nrows);
    for r in 0..a.nrows {
        let (cols, vals) = a.row_mut(r);
        if is_c[r] {
            for (idx, &c) in cols.iter().enumerate() {
                vals[idx] = if c == r { 1.0 } else { 0.0 };
            }
            b[r] = g[r];
        } else {
            for (idx, &c) in cols.iter().enumerate() {
                if is_c[c] {
                    b[r] -= vals[idx] * g[c];
                    vals[idx] = 0.0;
                }
            }
        }
    }
}

/// Per-component constraint sets for a velocity solved component-wise.
#[derive(Debug, Clone, Default)]
pub struct VectorConstraints {
    pub comp: [ConstraintSet; 2],
}

impl VectorConstraints {
    /// No-slip / inflow: both components prescribed on the given markers.
    pub fn dirichlet(
        space: &Space,
        markers: &[&str],
        g: impl Fn([f64; 2]) -> [f64; 2],
    ) -> Self {
        let gx = ConstraintSet::from_marker(space, markers, |x| g(x)[0]);
        let gy = ConstraintSet::from_marker(space, markers, |x| g(x)[1]);
        VectorConstraints { comp: [gx, gy] }
    }

    /// Free slip on axis-aligned facets: the normal velocity component is
    /// set to zero, the tangential one is left free. Errors if a marked
    /// facet is not axis-aligned.
    pub fn free_slip(space: &Space, markers: &[&str]) -> Result<Self> {
        let mesh = &space.mesh;
        let mut pairs: [Vec<(usize, f64)>; 2] = Default::default();
        for f in &mesh.boundary_facets {
            if !markers.contains(&f.marker.as_str()) {
                continue;
            }
            let locals = crate::reference::edge_nodes(space.degree, f.local_edge);
            let dofs: Vec<usize> = locals.iter().map(|&ln| space.elem_dofs[f.element][ln]).collect();
            let xs: Vec<[f64; 2]> = dofs.iter().map(|&d| space.dof_coords[d]).collect();
            let span = |c: usize| -> f64 {
                let lo = xs.iter().map(|x| x[c]).fold(f64::INFINITY, f64::min);
                let hi = xs.iter().map(|x| x[c]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            };
            let (sx, sy) = (span(0), span(1));
            let scale = sx.max(sy).max(1e-300);
            let normal_comp = if sx <= 1e-10 * scale {
                0 // facet lies on a vertical line: normal is x
            } else if sy <= 1e-10 * scale {
                1
            } else {
                return Err(Error::FreeSlipNotAxisAligned(f.marker.clone()));
            };
            for &d in &dofs {
                pairs[normal_comp].push((d, 0.0));
            }
        }
        let [px, py] = pairs;
        Ok(VectorConstraints {
            comp: [ConstraintSet::from_pairs(px), ConstraintSet::from_pairs(py)],
        })
    }

    pub fn merged(&self, other: &VectorConstraints) -> Result<Self> {
        Ok(VectorConstraints {
            comp: [
                self.comp[0].merged(&other.comp[0])?,
                self.comp[1].merged(&other.comp[1])?,
            ],
        })
    }

    /// Apply to a component-blocked vector coefficient array of length 2n.
    pub fn apply_to_vector(&self, v: &mut [f64], n_dofs: usize) {
        for c in 0..2 {
            for (&d, &g) in self.comp[c].dofs.iter().zip(&self.comp[c].values) {
                v[c * n_dofs + d] = g;
            }
        }
    }
}
