//! Run diagnostics: error norms against closed-form solutions, convergence
//! order fitting, and time-series output.

use std::io::Write as _;
use std::path::Path;

use crate::assembly::Assembler;
use crate::error::{Error, Result};
use crate::scheme::StepReport;
use crate::space::Space;

/// Relative L2 error of a scalar field against a reference function, after
/// removing the mean of both (for fields defined up to a constant, such as
/// the pressure).
pub fn scalar_error_l2_zero_mean(
    asm: &Assembler,
    space: &Space,
    coeffs: &[f64],
    exact: impl Fn([f64; 2]) -> f64,
) -> f64 {
    let vals = asm.eval_scalar(space, coeffs);
    let area = asm.domain_area();
    let exact_qp: Vec<f64> = asm.x.iter().map(|&x| exact(x)).collect();
    let mean_num = asm.integral(|_, _, q, _| vals[q]) / area;
    let mean_ex = asm.integral(|_, _, q, _| exact_qp[q]) / area;
    let err = asm
        .integral(|_, _, q, _| {
            let d = (vals[q] - mean_num) - (exact_qp[q] - mean_ex);
            d * d
        })
        .max(0.0)
        .sqrt();
    let nrm = asm
        .integral(|_, _, q, _| {
            let d = exact_qp[q] - mean_ex;
            d * d
        })
        .max(0.0)
        .sqrt();
    if nrm > 0.0 {
        err / nrm
    } else {
        err
    }
}

/// Relative H1-seminorm error of the velocity difference u_b - u_a against
/// a reference gradient, the error measure used for the relative-velocity
/// convergence studies.
pub fn velocity_diff_h1_error(
    asm: &Assembler,
    space: &Space,
    u_a: &[f64],
    u_b: &[f64],
    exact_grad: impl Fn([f64; 2]) -> [[f64; 2]; 2],
) -> f64 {
    let ga = asm.eval_vector_grad(space, u_a);
    let gb = asm.eval_vector_grad(space, u_b);
    let err = asm
        .integral(|_, _, q, x| {
            let ge = exact_grad(x);
            let mut acc = 0.0;
            for c in 0..2 {
                for d in 0..2 {
                    let v = (gb[q][c][d] - ga[q][c][d]) - ge[c][d];
                    acc += v * v;
                }
            }
            acc
        })
        .max(0.0)
        .sqrt();
    let base = asm
        .integral(|_, _, _, x| {
            let ge = exact_grad(x);
            let mut acc = 0.0;
            for c in 0..2 {
                for d in 0..2 {
                    acc += ge[c][d] * ge[c][d];
                }
            }
            acc
        })
        .max(0.0)
        .sqrt();
    if base > 0.0 {
        err / base
    } else {
        err
    }
}

/// Least-squares slope of log(err) against log(x), using at most the four
/// smallest x values: the observed convergence order.
pub fn fit_order(xs: &[f64], errs: &[f64]) -> f64 {
    assert_eq!(xs.len(), errs.len());
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let take: Vec<usize> = idx.into_iter().take(4).collect();
    let pts: Vec<(f64, f64)> = take
        .iter()
        .filter(|&&i| errs[i] > 0.0 && xs[i] > 0.0)
        .map(|&i| (xs[i].ln(), errs[i].ln()))
        .collect();
    assert!(pts.len() >= 2, "need at least two positive samples to fit an order");
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// One row of the run time series.
#[derive(Clone, Debug)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub kinetic_energy: f64,
    pub e_div: f64,
    pub partition_error: f64,
    pub alpha_min: f64,
    pub psi_total: f64,
    pub ineq_residual: f64,
}

impl TimeSeriesRow {
    pub fn from_report(r: &StepReport, ineq_residual: f64) -> Self {
        TimeSeriesRow {
            t: r.t,
            kinetic_energy: r.kinetic_energy,
            e_div: r.e_div,
            partition_error: r.partition_error,
            alpha_min: r.alpha_min,
            psi_total: r.psi_new,
            ineq_residual,
        }
    }
}

pub fn write_timeseries(path: &Path, rows: &[TimeSeriesRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io(e))?;
    writeln!(f, "t,E_kinetic,e_div,partition,alpha_min,psi_total,ineq_residual")
        .map_err(|e| Error::Io(e))?;
    for r in rows {
        writeln!(
            f,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.t, r.kinetic_energy, r.e_div, r.partition_error, r.alpha_min, r.psi_total,
            r.ineq_residual
        )
        .map_err(|e| Error::Io(e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;
    use crate::space::Space;
    use std::sync::Arc;

    fn setup() -> (Assembler, Space) {
        let m = Arc::new(
            mesh::build_rectangle(4, 4, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let asm = Assembler::new(m.clone(), 10).unwrap();
        let sp = Space::new(m, 2).unwrap();
        (asm, sp)
    }

    #[test]
    fn zero_mean_error_ignores_constant_shifts() {
        let (asm, sp) = setup();
        let coeffs = sp.interpolate(|x| x[0] * x[0] + 7.0);
        let e = scalar_error_l2_zero_mean(&asm, &sp, &coeffs, |x| x[0] * x[0] - 3.0);
        assert!(e < 1e-12, "{e}");
    }

    #[test]
    fn relative_velocity_error_is_exact_for_polynomials() {
        let (asm, sp) = setup();
        let ua = sp.interpolate_vector(|x| [x[0] * x[1], x[1]]);
        let ub = sp.interpolate_vector(|x| [2.0 * x[0] * x[1], x[1] + x[0] * x[0]]);
        // difference: (x y, x^2), gradient [[y, x], [2x, 0]]
        let e = velocity_diff_h1_error(&asm, &sp, &ua, &ub, |x| [[x[1], x[0]], [2.0 * x[0], 0.0]]);
        assert!(e < 1e-12, "{e}");
    }

    #[test]
    fn order_fit_recovers_known_slope() {
        let hs: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.4];
        let errs: Vec<f64> = hs.iter().map(|h| 3.0 * h.powi(2)).collect();
        let p = fit_order(&hs, &errs);
        assert!((p - 2.0).abs() < 1e-10, "{p}");
    }

    #[test]
    fn bdf1_energy_identity() {
        // 2 (a - b, a) = |a|^2 - |b|^2 + |a - b|^2, the algebraic identity
        // behind the discrete energy estimates
        let a = [1.5, -2.0, 0.25, 3.0];
        let b = [0.5, 1.0, -0.75, 2.0];
        let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
        let d: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        let lhs = 2.0 * dot(&d, &a);
        let rhs = dot(&a, &a) - dot(&b, &b) + dot(&d, &d);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn timeseries_roundtrip() {
        let dir = std::env::temp_dir().join("mpflow-diag-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ts.csv");
        let rows = vec![TimeSeriesRow {
            t: 0.1,
            kinetic_energy: 1.0,
            e_div: 1e-12,
            partition_error: 0.0,
            alpha_min: 0.5,
            psi_total: 2.0,
            ineq_residual: 0.0,
        }];
        write_timeseries(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,E_kinetic"));
        assert_eq!(text.lines().count(), 2);
    }
}
