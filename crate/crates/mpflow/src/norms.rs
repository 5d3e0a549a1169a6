//! Integral norms of finite-element fields, computed with the assembler's
//! quadrature rule.

use crate::assembly::Assembler;
use crate::space::Space;

pub fn scalar_l2(a: &Assembler, s: &Space, coeffs: &[f64]) -> f64 {
    let v = a.eval_scalar(s, coeffs);
    a.integral(|_, _, k, _| v[k] * v[k]).max(0.0).sqrt()
}

pub fn scalar_l1(a: &Assembler, s: &Space, coeffs: &[f64]) -> f64 {
    let v = a.eval_scalar(s, coeffs);
    a.integral(|_, _, k, _| v[k].abs())
}

pub fn scalar_h1_semi(a: &Assembler, s: &Space, coeffs: &[f64]) -> f64 {
    let g = a.eval_scalar_grad(s, coeffs);
    a.integral(|_, _, k, _| g[k][0] * g[k][0] + g[k][1] * g[k][1])
        .max(0.0)
        .sqrt()
}

pub fn vector_l2(a: &Assembler, s: &Space, coeffs: &[f64]) -> f64 {
    let v = a.eval_vector(s, coeffs);
    a.integral(|_, _, k, _| v[k][0] * v[k][0] + v[k][1] * v[k][1])
        .max(0.0)
        .sqrt()
}

pub fn vector_h1_semi(a: &Assembler, s: &Space, coeffs: &[f64]) -> f64 {
    let g = a.eval_vector_grad(s, coeffs);
    a.integral(|_, _, k, _| {
        let mut acc = 0.0;
        for c in 0..2 {
            for d in 0..2 {
                acc += g[k][c][d] * g[k][c][d];
            }
        }
        acc
    })
    .max(0.0)
    .sqrt()
}

pub fn linf_nodal(coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;
    use crate::space::Space;
    use std::sync::Arc;

    #[test]
    fn norms_of_known_fields() {
        let m = Arc::new(
            mesh::build_rectangle(4, 4, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let a = Assembler::new(m.clone(), 6).unwrap();
        let s = Space::new(m, 2).unwrap();
        // f = x: ||f||_L2 = 1/sqrt(3), |f|_H1 = 1, ||f||_L1 = 1/2
        let c = s.interpolate(|x| x[0]);
        assert!((scalar_l2(&a, &s, &c) - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((scalar_h1_semi(&a, &s, &c) - 1.0).abs() < 1e-12);
        assert!((scalar_l1(&a, &s, &c) - 0.5).abs() < 1e-12);
        // v = (y, -x): ||v||_L2 = sqrt(2/3), |v|_H1 = sqrt(2)
        let v = s.interpolate_vector(|x| [x[1], -x[0]]);
        assert!((vector_l2(&a, &s, &v) - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((vector_h1_semi(&a, &s, &v) - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((linf_nodal(&c) - 1.0).abs() < 1e-14);
    }
}
