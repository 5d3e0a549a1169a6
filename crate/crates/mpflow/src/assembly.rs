//! Quadrature-driven assembly of finite-element matrices, vectors and
//! functionals, plus evaluation of coefficient fields at quadrature points.
//!
//! The `Assembler` caches the geometric data (physical points, weighted
//! Jacobian determinants, inverse Jacobians) for one mesh and one quadrature
//! rule. All bilinear/linear forms of a time step are integrated with the
//! same rule so that discrete energy identities hold to round-off.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{det2, invert2, Mesh};
use crate::quadrature::QuadRule;
use crate::reference;
use crate::space::Space;
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Basis data of one space on one element at one quadrature point.
pub struct BasisAtQp {
    pub value: Vec<f64>,
    /// Physical gradients.
    pub grad: Vec<[f64; 2]>,
}

/// Read-only context handed to integrand closures.
pub struct QpCtx<'a> {
    pub elem: usize,
    pub qp: usize,
    /// Flat index `elem * nqp + qp` into quadrature-point field arrays.
    pub k: usize,
    pub x: [f64; 2],
    pub trial: &'a BasisAtQp,
    pub test: &'a BasisAtQp,
}

pub struct Assembler {
    pub mesh: Arc<Mesh>,
    pub rule: QuadRule,
    /// Physical coordinates per quadrature point, flat `e * nqp + q`.
    pub x: Vec<[f64; 2]>,
    /// Quadrature weight times Jacobian determinant.
    pub wdet: Vec<f64>,
    jinv: Vec<[[f64; 2]; 2]>,
}

impl Assembler {
    pub fn new(mesh: Arc<Mesh>, exactness: usize) -> Result<Self> {
        let rule = QuadRule::with_exactness(exactness);
        let nqp = rule.points.len();
        let ne = mesh.n_elements();
        let mut x = Vec::with_capacity(ne * nqp);
        let mut wdet = Vec::with_capacity(ne * nqp);
        let mut jinv = Vec::with_capacity(ne * nqp);
        for e in 0..ne {
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let j = mesh.jacobian(e, *p);
                let d = det2(&j);
                if !(d > 0.0) {
                    return Err(Error::Mesh(format!(
                        "non-positive Jacobian determinant {d:.3e} in element {e}"
                    )));
                }
                x.push(mesh.map_point(e, *p));
                wdet.push(w * d);
                jinv.push(invert2(&j));
            }
        }
        Ok(Assembler { mesh, rule, x, wdet, jinv })
    }

    pub fn nqp(&self) -> usize {
        self.rule.points.len()
    }

    /// Basis values and physical gradients of `space` on element `e` at all
    /// quadrature points.
    fn element_basis(&self, space: &Space, e: usize) -> Vec<BasisAtQp> {
        let nqp = self.nqp();
        let mut out = Vec::with_capacity(nqp);
        for q in 0..nqp {
            let p = self.rule.points[q];
            let value = reference::shape_values(space.degree, p);
            let rgrad = reference::shape_gradients(space.degree, p);
            let ji = &self.jinv[e * nqp + q];
            let grad = rgrad
                .iter()
                .map(|g| {
                    [
                        ji[0][0] * g[0] + ji[1][0] * g[1],
                        ji[0][1] * g[0] + ji[1][1] * g[1],
                    ]
                })
                .collect();
            out.push(BasisAtQp { value, grad });
        }
        out
    }

    /// Assemble the matrix of a bilinear form. The closure returns the
    /// integrand density for trial function `j` against test function `i`;
    /// the quadrature weight is applied here.
    pub fn matrix(
        &self,
        trial: &Space,
        test: &Space,
        mut f: impl FnMut(&QpCtx, usize, usize) -> f64,
    ) -> CsrMatrix {
        let nqp = self.nqp();
        let mut tb = TripletBuilder::new(test.n_dofs, trial.n_dofs);
        for e in 0..self.mesh.n_elements() {
            let tr = self.element_basis(trial, e);
            let te = self.element_basis(test, e);
            let nj = trial.elem_dofs[e].len();
            let ni = test.elem_dofs[e].len();
            let mut local = vec![0.0; ni * nj];
            for q in 0..nqp {
                let k = e * nqp + q;
                let ctx = QpCtx { elem: e, qp: q, k, x: self.x[k], trial: &tr[q], test: &te[q] };
                let w = self.wdet[k];
                for i in 0..ni {
                    for j in 0..nj {
                        local[i * nj + j] += w * f(&ctx, j, i);
                    }
                }
            }
            for i in 0..ni {
                for j in 0..nj {
                    tb.push(test.elem_dofs[e][i], trial.elem_dofs[e][j], local[i * nj + j]);
                }
            }
        }
        tb.build()
    }

    /// Assemble the vector of a linear form on the test space.
    pub fn vector(&self, test: &Space, mut f: impl FnMut(&QpCtx, usize) -> f64) -> Vec<f64> {
        let nqp = self.nqp();
        let mut out = vec![0.0; test.n_dofs];
        for e in 0..self.mesh.n_elements() {
            let te = self.element_basis(test, e);
            let ni = test.elem_dofs[e].len();
            for q in 0..nqp {
                let k = e * nqp + q;
                let ctx = QpCtx { elem: e, qp: q, k, x: self.x[k], trial: &te[q], test: &te[q] };
                let w = self.wdet[k];
                for i in 0..ni {
                    out[test.elem_dofs[e][i]] += w * f(&ctx, i);
                }
            }
        }
        out
    }

    /// Integrate a plain density over the domain.
    pub fn integral(&self, mut f: impl FnMut(usize, usize, usize, [f64; 2]) -> f64) -> f64 {
        let nqp = self.nqp();
        let mut s = 0.0;
        for e in 0..self.mesh.n_elements() {
            for q in 0..nqp {
                let k = e * nqp + q;
                s += self.wdet[k] * f(e, q, k, self.x[k]);
            }
        }
        s
    }

    pub fn domain_area(&self) -> f64 {
        self.wdet.iter().sum()
    }

    /// Scalar field values at all quadrature points (flat `e * nqp + q`).
    pub fn eval_scalar(&self, space: &Space, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), space.n_dofs);
        let nqp = self.nqp();
        let mut out = vec![0.0; self.mesh.n_elements() * nqp];
        for e in 0..self.mesh.n_elements() {
            let basis = self.element_basis(space, e);
            for q in 0..nqp {
                let mut v = 0.0;
                for (n, &d) in space.elem_dofs[e].iter().enumerate() {
                    v += basis[q].value[n] * coeffs[d];
                }
                out[e * nqp + q] = v;
            }
        }
        out
    }

    /// Scalar field physical gradients at all quadrature points.
    pub fn eval_scalar_grad(&self, space: &Space, coeffs: &[f64]) -> Vec<[f64; 2]> {
        assert_eq!(coeffs.len(), space.n_dofs);
        let nqp = self.nqp();
        let mut out = vec![[0.0; 2]; self.mesh.n_elements() * nqp];
        for e in 0..self.mesh.n_elements() {
            let basis = self.element_basis(space, e);
            for q in 0..nqp {
                let mut g = [0.0; 2];
                for (n, &d) in space.elem_dofs[e].iter().enumerate() {
                    g[0] += basis[q].grad[n][0] * coeffs[d];
                    g[1] += basis[q].grad[n][1] * coeffs[d];
                }
                out[e * nqp + q] = g;
            }
        }
        out
    }

    /// Component-blocked vector field values at all quadrature points.
    pub fn eval_vector(&self, space: &Space, coeffs: &[f64]) -> Vec<[f64; 2]> {
        assert_eq!(coeffs.len(), 2 * space.n_dofs);
        let nqp = self.nqp();
        let n = space.n_dofs;
        let mut out = vec![[0.0; 2]; self.mesh.n_elements() * nqp];
        for e in 0..self.mesh.n_elements() {
            let basis = self.element_basis(space, e);
            for q in 0..nqp {
                let mut v = [0.0; 2];
                for (m, &d) in space.elem_dofs[e].iter().enumerate() {
                    v[0] += basis[q].value[m] * coeffs[d];
                    v[1] += basis[q].value[m] * coeffs[n + d];
                }
                out[e * nqp + q] = v;
            }
        }
        out
    }

    /// Vector field gradients at all quadrature points; `out[k][c][d]` is
    /// the derivative of component c with respect to x_d.
    pub fn eval_vector_grad(&self, space: &Space, coeffs: &[f64]) -> Vec<[[f64; 2]; 2]> {
        assert_eq!(coeffs.len(), 2 * space.n_dofs);
        let nqp = self.nqp();
        let n = space.n_dofs;
        let mut out = vec![[[0.0; 2]; 2]; self.mesh.n_elements() * nqp];
        for e in 0..self.mesh.n_elements() {
            let basis = self.element_basis(space, e);
            for q in 0..nqp {
                let mut g = [[0.0; 2]; 2];
                for (m, &d) in space.elem_dofs[e].iter().enumerate() {
                    for c in 0..2 {
                        let coef = coeffs[c * n + d];
                        g[c][0] += basis[q].grad[m][0] * coef;
                        g[c][1] += basis[q].grad[m][1] * coef;
                    }
                }
                out[e * nqp + q] = g;
            }
        }
        out
    }

    /// Physical second derivatives (d/dxx, d/dxy, d/dyy) of each component
    /// of a vector field at all quadrature points.
    pub fn eval_vector_hessian(&self, space: &Space, coeffs: &[f64]) -> Vec<[[f64; 3]; 2]> {
        assert_eq!(coeffs.len(), 2 * space.n_dofs);
        let nqp = self.nqp();
        let n = space.n_dofs;
        let mut out = vec![[[0.0; 3]; 2]; self.mesh.n_elements() * nqp];
        for e in 0..self.mesh.n_elements() {
            let basis = self.element_basis(space, e);
            for q in 0..nqp {
                let p = self.rule.points[q];
                let ji = &self.jinv[e * nqp + q];
                // chain rule on a curved element: the physical Hessian of a
                // basis function needs the second derivatives of the
                // geometric map
                let xh = self.mesh.map_hessian(e, p);
                let rhess = reference::shape_hessians(space.degree, p);
                for (m, &d) in space.elem_dofs[e].iter().enumerate() {
                    // physical gradient of basis m (already available)
                    let pg = basis[q].grad[m];
                    // corrected reference Hessian: H_ref - sum_c (d2x_c) * (grad_x N)_c
                    let h = [
                        rhess[m][0] - xh[0][0] * pg[0] - xh[1][0] * pg[1],
                        rhess[m][1] - xh[0][1] * pg[0] - xh[1][1] * pg[1],
                        rhess[m][2] - xh[0][2] * pg[0] - xh[1][2] * pg[1],
                    ];
                    // physical Hessian = Jinv^T * H * Jinv (H symmetric 2x2)
                    let hm = [[h[0], h[1]], [h[1], h[2]]];
                    let mut tmp = [[0.0; 2]; 2]; // Jinv^T * H
                    for a in 0..2 {
                        for b in 0..2 {
                            tmp[a][b] = ji[0][a] * hm[0][b] + ji[1][a] * hm[1][b];
                        }
                    }
                    let hxx = tmp[0][0] * ji[0][0] + tmp[0][1] * ji[1][0];
                    let hxy = tmp[0][0] * ji[0][1] + tmp[0][1] * ji[1][1];
                    let hyy = tmp[1][0] * ji[0][1] + tmp[1][1] * ji[1][1];
                    for c in 0..2 {
                        let coef = coeffs[c * n + d];
                        out[e * nqp + q][c][0] += hxx * coef;
                        out[e * nqp + q][c][1] += hxy * coef;
                        out[e * nqp + q][c][2] += hyy * coef;
                    }
                }
            }
        }
        out
    }

    /// Row vector of basis integrals, used e.g. to pin the weighted mean of
    /// pure-Neumann pressure solutions.
    pub fn basis_integrals(&self, space: &Space) -> Vec<f64> {
        self.vector(space, |ctx, i| ctx.test.value[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;
    use crate::space::Space;

    fn unit_square() -> (Arc<Mesh>, Assembler) {
        let m = Arc::new(
            mesh::build_rectangle(1, 1, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let a = Assembler::new(m.clone(), 4).unwrap();
        (m, a)
    }

    #[test]
    fn q1_mass_matrix_reference_values() {
        let (m, a) = unit_square();
        let s = Space::new(m, 1).unwrap();
        let mass = a.matrix(&s, &s, |ctx, j, i| ctx.trial.value[j] * ctx.test.value[i]);
        let dense = mass.to_dense();
        for i in 0..4 {
            assert!((dense[i][i] - 1.0 / 9.0).abs() < 1e-14);
        }
        // edge-adjacent vertices: 1/18, diagonal: 1/36
        assert!((dense[0][1] - 1.0 / 18.0).abs() < 1e-14);
        assert!((dense[1][2] - 1.0 / 18.0).abs() < 1e-14);
        assert!((dense[0][2] - 1.0 / 36.0).abs() < 1e-14);
        assert!((dense[1][3] - 1.0 / 36.0).abs() < 1e-14);
    }

    #[test]
    fn q1_unit_load_vector() {
        let (m, a) = unit_square();
        let s = Space::new(m, 1).unwrap();
        let b = a.vector(&s, |ctx, i| ctx.test.value[i]);
        for &v in &b {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let m = Arc::new(mesh::build_annulus(3, 8, 0.25, 0.75).unwrap());
        let a = Assembler::new(m.clone(), 6).unwrap();
        let s = Space::new(m, 2).unwrap();
        let k = a.matrix(&s, &s, |ctx, j, i| {
            ctx.trial.grad[j][0] * ctx.test.grad[i][0] + ctx.trial.grad[j][1] * ctx.test.grad[i][1]
        });
        let ones = vec![1.0; s.n_dofs];
        let mut out = vec![0.0; s.n_dofs];
        k.mul_vec_into(&ones, &mut out);
        let max = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max < 1e-12 * k.max_abs(), "stiffness row sums {max}");
    }

    #[test]
    fn field_evaluation_reproduces_polynomials() {
        let m = Arc::new(
            mesh::build_rectangle(3, 2, (0.0, 2.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let a = Assembler::new(m.clone(), 6).unwrap();
        let s = Space::new(m, 2).unwrap();
        let f = |x: [f64; 2]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1];
        let coeffs = s.interpolate(f);
        let vals = a.eval_scalar(&s, &coeffs);
        let grads = a.eval_scalar_grad(&s, &coeffs);
        for (k, &x) in a.x.iter().enumerate() {
            assert!((vals[k] - f(x)).abs() < 1e-13);
            assert!((grads[k][0] - (2.0 * x[0] + 3.0 * x[1])).abs() < 1e-12);
            assert!((grads[k][1] - (3.0 * x[0] - 1.0)).abs() < 1e-12);
        }
        let uf = |x: [f64; 2]| [x[0] * x[1], x[1] * x[1]];
        let vc = s.interpolate_vector(uf);
        let vv = a.eval_vector(&s, &vc);
        let vg = a.eval_vector_grad(&s, &vc);
        let vh = a.eval_vector_hessian(&s, &vc);
        for (k, &x) in a.x.iter().enumerate() {
            assert!((vv[k][0] - x[0] * x[1]).abs() < 1e-13);
            assert!((vg[k][0][0] - x[1]).abs() < 1e-12);
            assert!((vg[k][0][1] - x[0]).abs() < 1e-12);
            assert!((vg[k][1][1] - 2.0 * x[1]).abs() < 1e-12);
            // component 0 hessian: xx=0, xy=1, yy=0; component 1: yy=2
            assert!(vh[k][0][0].abs() < 1e-11);
            assert!((vh[k][0][1] - 1.0).abs() < 1e-11);
            assert!((vh[k][1][2] - 2.0).abs() < 1e-11);
        }
    }

    #[test]
    fn hessian_on_curved_elements_matches_finite_differences() {
        // Check the chain rule for the physical Hessian on a curved element:
        // d/dxi_a of the physical gradient equals H_phys * (dx/dxi_a).
        use crate::mesh::invert2;
        use crate::reference;
        let m = Arc::new(mesh::build_annulus(4, 12, 0.25, 0.75).unwrap());
        let a = Assembler::new(m.clone(), 4).unwrap();
        let s = Space::new(m.clone(), 2).unwrap();
        let coeffs = s.interpolate_vector(|x| {
            [x[0] * x[0] * x[1] - 0.3 * x[1] * x[1], 0.7 * x[0] * x[1]]
        });
        let vh = a.eval_vector_hessian(&s, &coeffs);
        // discrete physical gradient of component 0 at an arbitrary ref point
        let phys_grad = |e: usize, p: [f64; 2]| -> [f64; 2] {
            let ji = invert2(&m.jacobian(e, p));
            let rg = reference::shape_gradients(2, p);
            let mut g = [0.0; 2];
            for (n, &d) in s.elem_dofs[e].iter().enumerate() {
                g[0] += (ji[0][0] * rg[n][0] + ji[1][0] * rg[n][1]) * coeffs[d];
                g[1] += (ji[0][1] * rg[n][0] + ji[1][1] * rg[n][1]) * coeffs[d];
            }
            g
        };
        let eps = 1e-6;
        let nqp = a.nqp();
        for e in [0usize, 7, 23] {
            for q in 0..nqp {
                let p = a.rule.points[q];
                let h = vh[e * nqp + q][0]; // [xx, xy, yy]
                let jac = m.jacobian(e, p);
                for axis in 0..2 {
                    let mut pp = p;
                    let mut pm = p;
                    pp[axis] += eps;
                    pm[axis] -= eps;
                    let gp = phys_grad(e, pp);
                    let gm = phys_grad(e, pm);
                    let fd = [(gp[0] - gm[0]) / (2.0 * eps), (gp[1] - gm[1]) / (2.0 * eps)];
                    // H * column `axis` of the Jacobian
                    let col = [jac[0][axis], jac[1][axis]];
                    let pred = [h[0] * col[0] + h[1] * col[1], h[1] * col[0] + h[2] * col[1]];
                    assert!((fd[0] - pred[0]).abs() < 1e-6, "e{e} q{q} axis{axis}");
                    assert!((fd[1] - pred[1]).abs() < 1e-6, "e{e} q{q} axis{axis}");
                }
            }
        }
    }

    #[test]
    fn matrix_is_bilinear_in_coefficient_field() {
        // assembling with density c(x) * u * v must be linear in c
        let (m, a) = unit_square();
        let s = Space::new(m, 2).unwrap();
        let c1 = a.eval_scalar(&s, &s.interpolate(|x| 1.0 + x[0]));
        let c2 = a.eval_scalar(&s, &s.interpolate(|x| x[1] * x[1]));
        let m1 = a.matrix(&s, &s, |ctx, j, i| c1[ctx.k] * ctx.trial.value[j] * ctx.test.value[i]);
        let m2 = a.matrix(&s, &s, |ctx, j, i| c2[ctx.k] * ctx.trial.value[j] * ctx.test.value[i]);
        let m12 = a.matrix(&s, &s, |ctx, j, i| {
            (2.0 * c1[ctx.k] - 3.0 * c2[ctx.k]) * ctx.trial.value[j] * ctx.test.value[i]
        });
        let d1 = m1.to_dense();
        let d2 = m2.to_dense();
        let d12 = m12.to_dense();
        for i in 0..s.n_dofs {
            for j in 0..s.n_dofs {
                assert!((d12[i][j] - (2.0 * d1[i][j] - 3.0 * d2[i][j])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn basis_integrals_sum_to_area() {
        let m = Arc::new(mesh::build_disk(3, 3, 1.0).unwrap());
        let a = Assembler::new(m.clone(), 6).unwrap();
        let s = Space::new(m, 1).unwrap();
        let w = a.basis_integrals(&s);
        let total: f64 = w.iter().sum();
        assert!((total - a.domain_area()).abs() < 1e-12);
    }
}
