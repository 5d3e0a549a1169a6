//! Krylov solvers: CG for SPD systems, BiCGSTAB for nonsymmetric ones,
//! restarted GMRES for saddle points, and a mean-projected CG for the
//! singular pure-Neumann pressure problems.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preconditioner {
    None,
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    /// Relative residual tolerance.
    pub rel_tol: f64,
    /// Absolute residual floor: convergence when ||r|| <= max(rel_tol*||b||, abs_floor).
    pub abs_floor: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            rel_tol: 1e-10,
            abs_floor: 1e-300,
            max_iterations: 20_000,
            preconditioner: Preconditioner::Diagonal,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.rel_tol <= 0.0 {
            return Err(Error::InvalidInput("solver tolerance must be positive".into()));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inv_diag(a: &CsrMatrix, pc: Preconditioner) -> Option<Vec<f64>> {
    match pc {
        Preconditioner::None => None,
        Preconditioner::Diagonal => Some(
            a.diagonal()
                .iter()
                .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        ),
    }
}

/// Verify the returned residual with a fresh matrix-vector product.
fn verify_residual(a: &CsrMatrix, b: &[f64], x: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    norm2(&r)
}

/// Preconditioned conjugate gradients for SPD systems.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], s: &SolverSettings) -> Result<Vec<f64>> {
    cg_projected(a, b, s, None)
}

/// CG with an optional projection applied to the iterates each iteration;
/// used for the singular Neumann problem where constants span the nullspace.
fn cg_projected(
    a: &CsrMatrix,
    b: &[f64],
    s: &SolverSettings,
    project: Option<&dyn Fn(&mut [f64])>,
) -> Result<Vec<f64>> {
    s.validate()?;
    let n = b.len();
    assert_eq!(a.nrows, n);
    let minv = inv_diag(a, s.preconditioner);

    // note: b must already be consistent (orthogonal to the nullspace in the
    // Euclidean sense); the projection only pins the mean of the iterate.
    let b = b.to_vec();
    let bnorm = norm2(&b);
    let target = (s.rel_tol * bnorm).max(s.abs_floor);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }

    let mut r = b.clone();
    let apply_m = |r: &[f64]| -> Vec<f64> {
        match &minv {
            Some(d) => r.iter().zip(d).map(|(ri, di)| ri * di).collect(),
            None => r.to_vec(),
        }
    };
    let mut z = apply_m(&r);
    if let Some(p) = project {
        p(&mut z);
    }
    let mut p_dir = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for _it in 0..s.max_iterations {
        a.mul_vec_into(&p_dir, &mut ap);
        let pap = dot(&p_dir, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverBreakdown {
                method: "cg",
                detail: format!("non-positive curvature p'Ap = {pap:.3e}"),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p_dir[i];
            r[i] -= alpha * ap[i];
        }
        if let Some(pr) = project {
            pr(&mut x);
        }
        if norm2(&r) <= target {
            let res = verify_residual(a, &b, &x);
            if res <= 10.0 * target {
                return Ok(x);
            }
            // Recomputed residual disagrees; keep iterating on the true residual.
            let ax = a.mul_vec(&x);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
        }
        let mut z_new = apply_m(&r);
        if let Some(pr) = project {
            pr(&mut z_new);
        }
        let rz_new = dot(&r, &z_new);
        let beta = rz_new / rz;
        for i in 0..n {
            p_dir[i] = z_new[i] + beta * p_dir[i];
        }
        z = z_new;
        rz = rz_new;
    }
    let _ = z;
    Err(Error::SolverFailure {
        method: "cg",
        iterations: s.max_iterations,
        residual: verify_residual(a, &b, &x) / bnorm,
    })
}

/// BiCGSTAB for nonsingular, possibly nonsymmetric systems. Restarts from
/// the current iterate on breakdown of the recurrence.
pub fn solve_nonsymmetric(a: &CsrMatrix, b: &[f64], s: &SolverSettings) -> Result<Vec<f64>> {
    s.validate()?;
    let n = b.len();
    assert_eq!(a.nrows, n);
    let minv = inv_diag(a, s.preconditioner);
    let apply_m = |v: &[f64], out: &mut Vec<f64>| {
        out.clear();
        match &minv {
            Some(d) => out.extend(v.iter().zip(d).map(|(vi, di)| vi * di)),
            None => out.extend_from_slice(v),
        }
    };

    let bnorm = norm2(b);
    let target = (s.rel_tol * bnorm).max(s.abs_floor);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }

    let mut it_total = 0usize;
    let mut tmp = vec![0.0; n];
    'restart: loop {
        // fresh residual from the current iterate
        a.mul_vec_into(&x, &mut tmp);
        let mut r: Vec<f64> = b.iter().zip(&tmp).map(|(bi, ti)| bi - ti).collect();
        if norm2(&r) <= target {
            return Ok(x);
        }
        if it_total >= s.max_iterations {
            return Err(Error::SolverFailure {
                method: "bicgstab",
                iterations: it_total,
                residual: norm2(&r) / bnorm,
            });
        }
        let r0 = r.clone();
        let mut rho = 1.0;
        let mut alpha = 1.0;
        let mut omega = 1.0;
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut phat = Vec::with_capacity(n);
        let mut shat = Vec::with_capacity(n);
        let mut t = vec![0.0; n];
        let mut stalled = 0usize;

        while it_total < s.max_iterations {
            it_total += 1;
            let rho_new = dot(&r0, &r);
            let rnorm = norm2(&r);
            if rho_new.abs() < 1e-14 * rnorm * norm2(&r0) {
                continue 'restart;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            apply_m(&p, &mut phat);
            a.mul_vec_into(&phat, &mut v);
            let r0v = dot(&r0, &v);
            if r0v.abs() < 1e-300 {
                continue 'restart;
            }
            alpha = rho / r0v;
            let sres: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
            if norm2(&sres) <= target {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                if verify_residual(a, b, &x) <= 10.0 * target {
                    return Ok(x);
                }
                continue 'restart;
            }
            apply_m(&sres, &mut shat);
            a.mul_vec_into(&shat, &mut t);
            let tt = dot(&t, &t);
            if tt < 1e-300 {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                continue 'restart;
            }
            omega = dot(&t, &sres) / tt;
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] = sres[i] - omega * t[i];
            }
            let rn = norm2(&r);
            if rn <= target {
                if verify_residual(a, b, &x) <= 10.0 * target {
                    return Ok(x);
                }
                continue 'restart;
            }
            if rn >= 0.999 * rnorm {
                stalled += 1;
                if stalled > 50 {
                    continue 'restart;
                }
            } else {
                stalled = 0;
            }
        }
        a.mul_vec_into(&x, &mut tmp);
        let rfin: f64 = b
            .iter()
            .zip(&tmp)
            .map(|(bi, ti)| (bi - ti) * (bi - ti))
            .sum::<f64>()
            .sqrt();
        if rfin <= 10.0 * target {
            return Ok(x);
        }
        return Err(Error::SolverFailure {
            method: "bicgstab",
            iterations: it_total,
            residual: rfin / bnorm,
        });
    }
}

/// CG on the complement of the constant nullspace. `mass_weights` holds the
/// integrals of the test basis functions, so `mass_weights . x` is the
/// discrete mean of the field times |Omega|. The right-hand side is first
/// projected orthogonal to constants; the solution is returned with zero
/// mass-weighted mean.
pub fn solve_singular_neumann(
    a: &CsrMatrix,
    b: &[f64],
    mass_weights: &[f64],
    s: &SolverSettings,
) -> Result<Vec<f64>> {
    let n = b.len();
    assert_eq!(mass_weights.len(), n);
    let wsum: f64 = mass_weights.iter().sum();
    let w = mass_weights.to_vec();
    let project = move |x: &mut [f64]| {
        let mean = dot(&w, x) / wsum;
        for xi in x.iter_mut() {
            *xi -= mean;
        }
    };

    // b must be orthogonal to the constant vector for consistency.
    let ones_comp: f64 = b.iter().sum::<f64>() / (n as f64);
    let b_proj: Vec<f64> = b.iter().map(|bi| bi - ones_comp).collect();
    let bnorm = norm2(b);
    if bnorm > 0.0 && (ones_comp * (n as f64).sqrt()) / bnorm > 1e-6 {
        eprintln!(
            "warning: pure-Neumann rhs has a large constant component ({:.3e} relative)",
            (ones_comp * (n as f64).sqrt()) / bnorm
        );
    }

    let mut x = cg_projected(a, &b_proj, s, Some(&project))?;
    project(&mut x);
    Ok(x)
}

/// Restarted GMRES with an optional diagonal preconditioner supplied by the
/// caller (entries are the inverse diagonal to multiply residuals by).
pub fn solve_gmres(
    a: &CsrMatrix,
    b: &[f64],
    inv_diag_pc: Option<&[f64]>,
    restart: usize,
    s: &SolverSettings,
) -> Result<Vec<f64>> {
    s.validate()?;
    let n = b.len();
    let apply_m = |v: &[f64]| -> Vec<f64> {
        match inv_diag_pc {
            Some(d) => v.iter().zip(d).map(|(vi, di)| vi * di).collect(),
            None => v.to_vec(),
        }
    };

    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = (s.rel_tol * bnorm).max(s.abs_floor);
    let mut x = vec![0.0; n];
    let m = restart.max(1);
    let mut total_iters = 0usize;

    while total_iters < s.max_iterations {
        let ax = a.mul_vec(&x);
        let r0: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        if norm2(&r0) <= target {
            return Ok(x);
        }
        let z0 = apply_m(&r0);
        let beta = norm2(&z0);
        if beta < 1e-300 {
            return Ok(x);
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        v.push(z0.iter().map(|zi| zi / beta).collect());
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;

        for k in 0..m {
            total_iters += 1;
            let av = a.mul_vec(&v[k]);
            let mut w = apply_m(&av);
            for i in 0..=k {
                h[i][k] = dot(&w, &v[i]);
                for j in 0..n {
                    w[j] -= h[i][k] * v[i][j];
                }
            }
            h[k + 1][k] = norm2(&w);
            if h[k + 1][k] > 1e-300 {
                v.push(w.iter().map(|wi| wi / h[k + 1][k]).collect());
            } else {
                v.push(vec![0.0; n]);
            }
            // Givens rotations to keep H upper triangular.
            for i in 0..k {
                let tmp = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = tmp;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom < 1e-300 {
                k_used = k + 1;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            // The preconditioned residual estimate |g[k+1]| is only a proxy;
            // use a slightly tighter target and verify on restart.
            if g[k + 1].abs() <= 0.1 * target {
                break;
            }
            if total_iters >= s.max_iterations {
                break;
            }
        }

        // Back-substitute for the update coefficients.
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s_acc = g[i];
            for j in i + 1..k_used {
                s_acc -= h[i][j] * y[j];
            }
            y[i] = s_acc / h[i][i];
        }
        for i in 0..k_used {
            for j in 0..n {
                x[j] += y[i] * v[i][j];
            }
        }
        if verify_residual(a, b, &x) <= target {
            return Ok(x);
        }
    }
    Err(Error::SolverFailure {
        method: "gmres",
        iterations: total_iters,
        residual: verify_residual(a, b, &x) / bnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletBuilder;

    fn dense_lu_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, piv);
            x.swap(k, piv);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= m[i][j] * x[j];
            }
            x[i] = s / m[i][i];
        }
        x
    }

    fn random_spd(n: usize, seed: u64) -> CsrMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                dense[i][j] = rng.gen_range(-1.0..1.0);
            }
        }
        // A = B' B + n I is SPD.
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += dense[k][i] * dense[k][j];
                }
                if i == j {
                    s += n as f64;
                }
                b.push(i, j, s);
            }
        }
        b.build()
    }

    #[test]
    fn cg_identity() {
        let a = CsrMatrix::identity(4);
        let b = vec![1.0, -2.0, 3.0, 0.5];
        let x = solve_spd(&a, &b, &SolverSettings::default()).unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_2x2_analytic() {
        let mut t = TripletBuilder::new(2, 2);
        t.push(0, 0, 2.0);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        t.push(1, 1, 2.0);
        let a = t.build();
        let x = solve_spd(&a, &[3.0, 3.0], &SolverSettings::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cg_matches_dense_lu() {
        let a = random_spd(20, 7);
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = solve_spd(&a, &b, &SolverSettings::default()).unwrap();
        let x_ref = dense_lu_solve(&a.to_dense(), &b);
        for (xi, ri) in x.iter().zip(&x_ref) {
            assert!((xi - ri).abs() < 1e-8, "{xi} vs {ri}");
        }
    }

    #[test]
    fn bicgstab_identity_and_triangular() {
        let a = CsrMatrix::identity(3);
        let x = solve_nonsymmetric(&a, &[1.0, 2.0, 3.0], &SolverSettings::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);

        // Upper triangular 3x3 vs back substitution.
        let mut t = TripletBuilder::new(3, 3);
        for (i, j, v) in [(0, 0, 2.0), (0, 1, 1.0), (0, 2, -1.0), (1, 1, 3.0), (1, 2, 2.0), (2, 2, 4.0)] {
            t.push(i, j, v);
        }
        let a = t.build();
        let b = [1.0, 5.0, 8.0];
        // back substitution: x2 = 2, x1 = (5-4)/3 = 1/3, x0 = (1 - 1/3 + 2)/2 = 4/3
        let x = solve_nonsymmetric(&a, &b, &SolverSettings::default()).unwrap();
        assert!((x[2] - 2.0).abs() < 1e-9);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-9);
        assert!((x[0] - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn bicgstab_matches_dense_lu() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 20;
        let mut t = TripletBuilder::new(n, n);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let v = rng.gen_range(-1.0..1.0) + if i == j { n as f64 } else { 0.0 };
                dense[i][j] = v;
                t.push(i, j, v);
            }
        }
        let a = t.build();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).cos()).collect();
        let x = solve_nonsymmetric(&a, &b, &SolverSettings::default()).unwrap();
        let x_ref = dense_lu_solve(&dense, &b);
        for (xi, ri) in x.iter().zip(&x_ref) {
            assert!((xi - ri).abs() < 1e-8);
        }
    }

    #[test]
    fn gmres_matches_dense_lu() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 25;
        let mut t = TripletBuilder::new(n, n);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let v = rng.gen_range(-1.0..1.0) + if i == j { 8.0 } else { 0.0 };
                dense[i][j] = v;
                t.push(i, j, v);
            }
        }
        let a = t.build();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.17).sin()).collect();
        let x = solve_gmres(&a, &b, None, 10, &SolverSettings::default()).unwrap();
        let x_ref = dense_lu_solve(&dense, &b);
        for (xi, ri) in x.iter().zip(&x_ref) {
            assert!((xi - ri).abs() < 1e-7);
        }
    }

    #[test]
    fn residual_reverified_after_success() {
        let a = random_spd(15, 42);
        let b: Vec<f64> = (0..15).map(|i| 1.0 + i as f64).collect();
        let s = SolverSettings::default();
        let x = solve_spd(&a, &b, &s).unwrap();
        let r = {
            let ax = a.mul_vec(&x);
            norm2(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>())
        };
        assert!(r <= 10.0 * s.rel_tol * norm2(&b));
    }
}
