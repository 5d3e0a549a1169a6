//! Semi-monolithic reference scheme: the volume fractions are still
//! transported segregatedly, but all phase momentum equations and the
//! shared pressure are solved as one coupled block system per step, with
//! the full symmetric-gradient viscous term and the drag coupling implicit.
//!
//! Unknown layout: [u_0x | u_0y | u_1x | ... | p | lambda], where lambda is
//! a scalar multiplier pinning the pressure mean. Velocity uses biquadratic
//! and pressure bilinear elements (inf-sup stable pairing); the solver is
//! restarted GMRES with a diagonal preconditioner.


use crate::assembly::Assembler;
use crate::constraints::{apply_constraints, ConstraintSet, VectorConstraints};
use crate::error::{Error, Result};
use crate::scheme::{clip_drag, FlowState, Problem, SchemeConfig, StepReport, VelocityBc};
use crate::solvers::solve_gmres;
use crate::space::Space;
use crate::sparse::TripletBuilder;
use crate::transport::{alpha_of, step_transport, variable_from_alpha};

pub struct MonolithicScheme {
    pub problem: Problem,
    pub cfg: SchemeConfig,
    pub asm: Assembler,
    pub vel_space: Space,
    pub p_space: Space,
    pub tr_space: Space,
    p_weights: Vec<f64>,
    pub gmres_restart: usize,
}

impl MonolithicScheme {
    pub fn new(problem: Problem, mut cfg: SchemeConfig) -> Result<Self> {
        if cfg.vel_degree != 2 || cfg.p_degree != 1 {
            return Err(Error::InvalidInput(
                "the coupled reference scheme requires biquadratic velocity and bilinear pressure"
                    .into(),
            ));
        }
        if problem.phases.is_empty() {
            return Err(Error::InvalidInput("at least one phase required".into()));
        }
        if cfg.quad_exactness == 0 {
            let d = cfg.vel_degree.max(cfg.p_degree).max(cfg.transport_degree);
            cfg.quad_exactness = 2 * d + 6;
        }
        let asm = Assembler::new(problem.mesh.clone(), cfg.quad_exactness)?;
        let vel_space = Space::new(problem.mesh.clone(), cfg.vel_degree)?;
        let p_space = Space::new(problem.mesh.clone(), cfg.p_degree)?;
        let tr_space = Space::new(problem.mesh.clone(), cfg.transport_degree)?;
        let p_weights = asm.basis_integrals(&p_space);
        Ok(MonolithicScheme {
            problem,
            cfg,
            asm,
            vel_space,
            p_space,
            tr_space,
            p_weights,
            gmres_restart: 120,
        })
    }

    pub fn n_phases(&self) -> usize {
        self.problem.phases.len()
    }

    fn velocity_constraints(&self, phase: usize, t: f64) -> Result<VectorConstraints> {
        let mut out = VectorConstraints::default();
        for bc in &self.problem.velocity_bcs {
            let piece = match bc {
                VelocityBc::Dirichlet { markers, value } => {
                    let mk: Vec<&str> = markers.iter().map(String::as_str).collect();
                    VectorConstraints::dirichlet(&self.vel_space, &mk, |x| value(phase, x, t))
                }
                VelocityBc::FreeSlip { markers } => {
                    let mk: Vec<&str> = markers.iter().map(String::as_str).collect();
                    VectorConstraints::free_slip(&self.vel_space, &mk)?
                }
            };
            out = out.merged(&piece)?;
        }
        Ok(out)
    }

    fn alpha_qp(&self, var: &[f64]) -> Vec<f64> {
        let f = self.cfg.transport.formulation;
        self.asm
            .eval_scalar(&self.tr_space, var)
            .into_iter()
            .map(|v| alpha_of(f, v))
            .collect()
    }

    pub fn initial_state(&self) -> Result<FlowState> {
        let m = self.n_phases();
        let f = self.cfg.transport.formulation;
        let mut phase_var = Vec::with_capacity(m);
        let mut u = Vec::with_capacity(m);
        for k in 0..m {
            phase_var.push(
                self.tr_space
                    .interpolate(|x| variable_from_alpha(f, (self.problem.initial_alpha)(k, x))),
            );
            u.push(self.vel_space.interpolate_vector(|x| (self.problem.initial_velocity)(k, x)));
        }
        let uhat_qp: Vec<Vec<[f64; 2]>> =
            u.iter().map(|uk| self.asm.eval_vector(&self.vel_space, uk)).collect();
        let uhat = u.clone();
        let p = vec![0.0; self.p_space.n_dofs];
        Ok(FlowState { step: 0, t: 0.0, phase_var, u, p, uhat_qp, uhat })
    }

    pub fn advance(&self, state: &FlowState) -> Result<(FlowState, StepReport)> {
        let m = self.n_phases();
        let tau = self.cfg.tau;
        let t_new = state.t + tau;
        let nq = self.asm.x.len();
        let nv = self.vel_space.n_dofs;
        let np = self.p_space.n_dofs;
        let ntot = 2 * m * nv + np + 1;

        // transport with the previous momentum velocity, as in the
        // segregated scheme
        let mut phase_var_new = Vec::with_capacity(m);
        for k in 0..m {
            phase_var_new.push(step_transport(
                &self.asm,
                &self.tr_space,
                &self.vel_space,
                &state.u[k],
                &state.phase_var[k],
                tau,
                &self.cfg.transport,
            )?);
        }
        let alpha_old: Vec<Vec<f64>> = state.phase_var.iter().map(|v| self.alpha_qp(v)).collect();
        let alpha_new: Vec<Vec<f64>> = phase_var_new.iter().map(|v| self.alpha_qp(v)).collect();
        let u_old_qp: Vec<Vec<[f64; 2]>> =
            state.u.iter().map(|c| self.asm.eval_vector(&self.vel_space, c)).collect();
        let gu_old_qp: Vec<Vec<[[f64; 2]; 2]>> =
            state.u.iter().map(|c| self.asm.eval_vector_grad(&self.vel_space, c)).collect();

        // clipped drag coefficients from the previous step, still explicit
        // in the coefficient but implicit in the velocity difference
        let mut drag: Vec<Vec<f64>> = Vec::new();
        for k in 0..m {
            for l in (k + 1)..m {
                let mut g = Vec::with_capacity(nq);
                for q in 0..nq {
                    let a: Vec<f64> = (0..m).map(|j| alpha_old[j][q]).collect();
                    let uu: Vec<[f64; 2]> = (0..m).map(|j| state.uhat_qp[j][q]).collect();
                    let raw =
                        (self.problem.drag.gamma)(k, l, self.asm.x[q], state.t, &a, &uu);
                    g.push(clip_drag(raw, self.problem.drag.cap));
                }
                drag.push(g);
            }
        }
        let pair = |k: usize, l: usize| {
            let (k, l) = if k < l { (k, l) } else { (l, k) };
            k * m - k * (k + 1) / 2 + (l - k - 1)
        };

        let vdof = |k: usize, c: usize| (2 * k + c) * nv;
        let pdof = 2 * m * nv;

        let mut tb = TripletBuilder::new(ntot, ntot);
        for k in 0..m {
            let ph = &self.problem.phases[k];
            // scalar part shared by both components
            let base = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
                let q = ctx.k;
                let uo = u_old_qp[k][q];
                let du = gu_old_qp[k][q][0][0] + gu_old_qp[k][q][1][1];
                // conservative half of the convection (volume-fraction flux
                // approximated with the old fraction gradient omitted; the
                // skew form keeps the operator dissipative)
                ph.rho * (alpha_new[k][q] + alpha_old[k][q]) / (2.0 * tau)
                    * ctx.trial.value[j]
                    * ctx.test.value[i]
                    + ph.rho
                        * alpha_new[k][q]
                        * ((uo[0] * ctx.trial.grad[j][0] + uo[1] * ctx.trial.grad[j][1])
                            * ctx.test.value[i]
                            + 0.5 * du * ctx.trial.value[j] * ctx.test.value[i])
            });
            for c in 0..2 {
                tb.push_block(vdof(k, c), vdof(k, c), &base, 1.0);
                for b in 0..2 {
                    // implicit 2 mu alpha sym(grad u) : grad v
                    let visc = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
                        let mut v = ctx.trial.grad[j][c] * ctx.test.grad[i][b];
                        if c == b {
                            v += ctx.trial.grad[j][0] * ctx.test.grad[i][0]
                                + ctx.trial.grad[j][1] * ctx.test.grad[i][1];
                        }
                        ph.mu * alpha_new[k][ctx.k] * v
                    });
                    tb.push_block(vdof(k, c), vdof(k, b), &visc, 1.0);
                }
                // pressure gradient <alpha grad p, v>
                let grad_p = self.asm.matrix(&self.p_space, &self.vel_space, |ctx, j, i| {
                    alpha_new[k][ctx.k] * ctx.trial.grad[j][c] * ctx.test.value[i]
                });
                tb.push_block(vdof(k, c), pdof, &grad_p, 1.0);
                // continuity row <alpha u, grad q>
                let div = self.asm.matrix(&self.vel_space, &self.p_space, |ctx, j, i| {
                    alpha_new[k][ctx.k] * ctx.trial.value[j] * ctx.test.grad[i][c]
                });
                tb.push_block(pdof, vdof(k, c), &div, 1.0);
            }
            // implicit drag: + sum_l gamma (u_k - u_l) tested against v_k
            for l in 0..m {
                if l == k {
                    continue;
                }
                let g = drag[pair(k, l)].clone();
                let mass_g = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
                    g[ctx.k] * ctx.trial.value[j] * ctx.test.value[i]
                });
                for c in 0..2 {
                    tb.push_block(vdof(k, c), vdof(k, c), &mass_g, 1.0);
                    tb.push_block(vdof(k, c), vdof(l, c), &mass_g, -1.0);
                }
            }
        }
        // multiplier pinning the pressure mean
        for i in 0..np {
            tb.push(pdof + i, pdof + np, self.p_weights[i]);
            tb.push(pdof + np, pdof + i, self.p_weights[i]);
        }
        let mut a = tb.build();

        let mut b = vec![0.0; ntot];
        for k in 0..m {
            let ph = &self.problem.phases[k];
            for c in 0..2 {
                let rhs = self.asm.vector(&self.vel_space, |ctx, i| {
                    let q = ctx.k;
                    let grav = (ph.gravity)(ctx.x, t_new);
                    ph.rho / tau * alpha_old[k][q] * u_old_qp[k][q][c] * ctx.test.value[i]
                        + ph.rho * alpha_new[k][q] * grav[c] * ctx.test.value[i]
                });
                b[vdof(k, 0) + c * nv..vdof(k, 0) + (c + 1) * nv].copy_from_slice(&rhs);
            }
        }

        // boundary conditions per phase, shifted into the block numbering
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for k in 0..m {
            let cs = self.velocity_constraints(k, t_new)?;
            for c in 0..2 {
                pairs.extend(
                    cs.comp[c]
                        .dofs
                        .iter()
                        .zip(&cs.comp[c].values)
                        .map(|(&d, &g)| (vdof(k, c) + d, g)),
                );
            }
        }
        let full = ConstraintSet::from_pairs(pairs);
        apply_constraints(&mut a, &mut b, &full);

        // diagonal preconditioner: momentum diagonal, pressure rows scaled
        // by the mobility stiffness diagonal, unit entry for the multiplier
        let mob: Vec<f64> = (0..nq)
            .map(|q| (0..m).map(|k| alpha_new[k][q] / self.problem.phases[k].rho).sum())
            .collect();
        let stiff = self.asm.matrix(&self.p_space, &self.p_space, |ctx, j, i| {
            mob[ctx.k]
                * (ctx.trial.grad[j][0] * ctx.test.grad[i][0]
                    + ctx.trial.grad[j][1] * ctx.test.grad[i][1])
        });
        let mut inv_diag = vec![1.0; ntot];
        let adiag = a.diagonal();
        for (i, v) in inv_diag.iter_mut().enumerate().take(2 * m * nv) {
            if adiag[i].abs() > 1e-300 {
                *v = 1.0 / adiag[i];
            }
        }
        let sdiag = stiff.diagonal();
        for i in 0..np {
            let d = tau * sdiag[i];
            if d.abs() > 1e-300 {
                inv_diag[pdof + i] = 1.0 / d;
            }
        }

        let sol = solve_gmres(&a, &b, Some(&inv_diag), self.gmres_restart, &self.cfg.momentum_solver)?;
        if !sol.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { step: state.step + 1, field: "coupled solution".into() });
        }

        let mut u_new = Vec::with_capacity(m);
        for k in 0..m {
            u_new.push(sol[vdof(k, 0)..vdof(k, 0) + 2 * nv].to_vec());
        }
        let p_new = sol[pdof..pdof + np].to_vec();
        let uhat_qp_new: Vec<Vec<[f64; 2]>> =
            u_new.iter().map(|c| self.asm.eval_vector(&self.vel_space, c)).collect();

        // diagnostics
        let mut kinetic = 0.0;
        for k in 0..m {
            kinetic += 0.5
                * self.problem.phases[k].rho
                * self.asm.integral(|_, _, q, _| {
                    let u = uhat_qp_new[k][q];
                    alpha_new[k][q] * (u[0] * u[0] + u[1] * u[1])
                });
        }
        let fdiv = self.asm.vector(&self.p_space, |ctx, i| {
            let q = ctx.k;
            let mut r = 0.0;
            for k in 0..m {
                r += alpha_new[k][q]
                    * (uhat_qp_new[k][q][0] * ctx.test.grad[i][0]
                        + uhat_qp_new[k][q][1] * ctx.test.grad[i][1]);
            }
            r
        });
        let e_div = fdiv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let partition_error = self.asm.integral(|_, _, q, _| {
            let s: f64 = (0..m).map(|k| alpha_new[k][q]).sum();
            (s - 1.0).abs()
        }) / self.asm.domain_area();
        let mut alpha_min = f64::INFINITY;
        for k in 0..m {
            for q in 0..nq {
                alpha_min = alpha_min.min(alpha_new[k][q]);
            }
        }

        let report = StepReport {
            step: state.step + 1,
            t: t_new,
            e_div,
            e_div_scale: self.cfg.momentum_solver.rel_tol * bnorm,
            partition_error,
            kinetic_energy: kinetic,
            alpha_min,
            alpha_low_warning: alpha_min < self.cfg.alpha_min_warn,
            ..Default::default()
        };
        let new_state = FlowState {
            step: state.step + 1,
            t: t_new,
            phase_var: phase_var_new,
            u: u_new.clone(),
            p: p_new,
            uhat_qp: uhat_qp_new,
            uhat: u_new,
        };
        Ok((new_state, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use crate::mesh;
    use crate::norms::linf_nodal;
    use crate::scheme::{DragModel, PhaseParams, Scheme, SchemeConfig};
    use crate::solvers::SolverSettings;

    fn lid_problem(rho2: f64) -> Problem {
        let m = Arc::new(
            mesh::build_rectangle(3, 3, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        Problem {
            mesh: m,
            phases: vec![PhaseParams::new(1.0, 0.1), PhaseParams::new(rho2, 0.2)],
            drag: DragModel { cap: 10.0, gamma: Arc::new(|_, _, _, _, _, _| 1.0) },
            velocity_bcs: vec![
                VelocityBc::Dirichlet {
                    markers: vec!["t".into()],
                    value: Arc::new(|_, x, _| [16.0 * x[0] * x[0] * (1.0 - x[0]) * (1.0 - x[0]), 0.0]),
                },
                VelocityBc::Dirichlet {
                    markers: vec!["b".into(), "r".into(), "l".into()],
                    value: Arc::new(|_, _, _| [0.0, 0.0]),
                },
            ],
            initial_velocity: Arc::new(|_, _| [0.0, 0.0]),
            initial_alpha: Arc::new(|_, _| 0.5),
        }
    }

    #[test]
    fn rejects_unstable_element_pairing() {
        let cfg = SchemeConfig { vel_degree: 1, ..Default::default() };
        assert!(MonolithicScheme::new(lid_problem(1.0), cfg).is_err());
    }

    #[test]
    fn quiescent_flow_stays_at_rest() {
        let m = Arc::new(
            mesh::build_rectangle(3, 3, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
        );
        let problem = Problem {
            mesh: m,
            phases: vec![PhaseParams::new(1.0, 0.1), PhaseParams::new(2.0, 0.2)],
            drag: DragModel::none(),
            velocity_bcs: vec![VelocityBc::Dirichlet {
                markers: vec!["b".into(), "r".into(), "t".into(), "l".into()],
                value: Arc::new(|_, _, _| [0.0, 0.0]),
            }],
            initial_velocity: Arc::new(|_, _| [0.0, 0.0]),
            initial_alpha: Arc::new(|_, _| 0.5),
        };
        let scheme = MonolithicScheme::new(problem, SchemeConfig::default()).unwrap();
        let s0 = scheme.initial_state().unwrap();
        let (s1, rep) = scheme.advance(&s0).unwrap();
        for k in 0..2 {
            assert!(linf_nodal(&s1.u[k]) < 1e-10);
        }
        assert!(linf_nodal(&s1.p) < 1e-8);
        assert!(rep.kinetic_energy < 1e-18);
    }

    #[test]
    fn lid_driven_step_is_divergence_consistent() {
        let tight = SolverSettings { rel_tol: 1e-11, ..Default::default() };
        let cfg = SchemeConfig {
            tau: 0.05,
            momentum_solver: tight.clone(),
            pressure_solver: tight.clone(),
            mass_solver: tight,
            ..Default::default()
        };
        let scheme = MonolithicScheme::new(lid_problem(2.0), cfg).unwrap();
        let mut state = scheme.initial_state().unwrap();
        for _ in 0..2 {
            let (s, rep) = scheme.advance(&state).unwrap();
            assert!(rep.kinetic_energy.is_finite() && rep.kinetic_energy > 0.0);
            // continuity row enforced to solver tolerance
            assert!(
                rep.e_div <= 1e3 * rep.e_div_scale.max(1e-13),
                "e_div {:e} vs scale {:e}",
                rep.e_div,
                rep.e_div_scale
            );
            // mean pressure is pinned
            let wmean: f64 = scheme
                .p_weights
                .iter()
                .zip(&s.p)
                .map(|(w, p)| w * p)
                .sum();
            assert!(wmean.abs() < 1e-8);
            state = s;
        }
    }

    #[test]
    fn agrees_with_segregated_scheme_for_small_steps() {
        // single phase, mild lid flow: the splitting error of the
        // segregated scheme vanishes with tau, so one step of each scheme
        // converges to the same result; the gap must shrink with tau
        let mk_problem = || {
            let m = Arc::new(
                mesh::build_rectangle(3, 3, (0.0, 1.0), (0.0, 1.0), ["b", "r", "t", "l"]).unwrap(),
            );
            Problem {
                mesh: m,
                phases: vec![PhaseParams::new(1.0, 0.5)],
                drag: DragModel::none(),
                velocity_bcs: vec![
                    VelocityBc::Dirichlet {
                        markers: vec!["t".into()],
                        value: Arc::new(|_, x, _| {
                            [16.0 * x[0] * x[0] * (1.0 - x[0]) * (1.0 - x[0]), 0.0]
                        }),
                    },
                    VelocityBc::Dirichlet {
                        markers: vec!["b".into(), "r".into(), "l".into()],
                        value: Arc::new(|_, _, _| [0.0, 0.0]),
                    },
                ],
                initial_velocity: Arc::new(|_, _| [0.0, 0.0]),
                initial_alpha: Arc::new(|_, _| 1.0),
            }
        };
        let gap = |tau: f64| -> f64 {
            let tight = SolverSettings { rel_tol: 1e-12, ..Default::default() };
            let cfg = SchemeConfig {
                tau,
                momentum_solver: tight.clone(),
                pressure_solver: tight.clone(),
                mass_solver: tight,
                implicit_viscous: true,
                ..Default::default()
            };
            let seg = Scheme::new(mk_problem(), cfg.clone()).unwrap();
            let mono = MonolithicScheme::new(mk_problem(), cfg).unwrap();
            let (s_seg, _) = seg.advance(&seg.initial_state().unwrap()).unwrap();
            let (s_mono, _) = mono.advance(&mono.initial_state().unwrap()).unwrap();
            let diff: Vec<f64> = s_seg.u[0]
                .iter()
                .zip(&s_mono.u[0])
                .map(|(a, b)| a - b)
                .collect();
            linf_nodal(&diff) / linf_nodal(&s_mono.u[0]).max(1e-30)
        };
        let g1 = gap(0.02);
        let g2 = gap(0.005);
        assert!(g1 < 0.5, "gap at tau=0.02: {g1}");
        assert!(g2 < g1, "gap did not shrink: {g2} vs {g1}");
    }
}
