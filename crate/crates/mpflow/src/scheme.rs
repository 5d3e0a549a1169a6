//! Segregated pressure-correction time integrator for dispersed multiphase
//! flow.
//!
//! Each step advances M phases sharing one pressure:
//! 1. transport each volume fraction with the previous velocity;
//! 2. solve one scalar advection-diffusion-reaction problem per phase and
//!    per velocity component (convection explicit in the advecting field,
//!    diffusion implicit, pressure and drag explicit);
//! 3. solve a single pressure Poisson problem (pure Neumann);
//! 4. update the end-of-step velocities pointwise at quadrature points.
//!
//! The end-of-step velocity is kept as quadrature-point samples so that the
//! discrete energy identities behind the unconditional-stability estimate
//! hold to solver tolerance; an L2-projected counterpart is also computed
//! for output and drag evaluation at the next step.

use std::sync::Arc;

use crate::assembly::Assembler;
use crate::constraints::{apply_constraints, ConstraintSet, VectorConstraints};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::solvers::{solve_nonsymmetric, solve_singular_neumann, solve_spd, SolverSettings};
use crate::space::Space;
use crate::sparse::{CsrMatrix, TripletBuilder};
use crate::transport::{
    alpha_of, step_transport, variable_from_alpha, TransportConfig, TransportFormulation,
};

pub type GravityFn = Arc<dyn Fn([f64; 2], f64) -> [f64; 2] + Send + Sync>;
pub type VelocityFn = Arc<dyn Fn(usize, [f64; 2], f64) -> [f64; 2] + Send + Sync>;

#[derive(Clone)]
pub struct PhaseParams {
    pub rho: f64,
    pub mu: f64,
    pub gravity: GravityFn,
}

impl PhaseParams {
    pub fn new(rho: f64, mu: f64) -> Self {
        PhaseParams { rho, mu, gravity: Arc::new(|_, _| [0.0, 0.0]) }
    }
}

/// Drag coefficient between phases k and l, evaluated pointwise:
/// (k, l, x, t, alpha per phase, end-of-step velocity per phase) -> gamma.
pub type DragFn = Arc<dyn Fn(usize, usize, [f64; 2], f64, &[f64], &[[f64; 2]]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DragModel {
    /// Clipping bound D: the scheme uses min(gamma, D).
    pub cap: f64,
    pub gamma: DragFn,
}

impl DragModel {
    pub fn none() -> Self {
        DragModel { cap: 1e6, gamma: Arc::new(|_, _, _, _, _, _| 0.0) }
    }
}

/// Clipped drag coefficient used by the scheme.
pub fn clip_drag(gamma: f64, cap: f64) -> f64 {
    gamma.max(0.0).min(cap)
}

#[derive(Clone)]
pub enum VelocityBc {
    /// Prescribed velocity (phase, x, t) -> u on the given markers.
    Dirichlet { markers: Vec<String>, value: VelocityFn },
    /// Zero normal component on axis-aligned facets, tangential left free.
    FreeSlip { markers: Vec<String> },
}

#[derive(Clone)]
pub struct Problem {
    pub mesh: Arc<Mesh>,
    pub phases: Vec<PhaseParams>,
    pub drag: DragModel,
    pub velocity_bcs: Vec<VelocityBc>,
    /// Initial velocity per phase.
    pub initial_velocity: Arc<dyn Fn(usize, [f64; 2]) -> [f64; 2] + Send + Sync>,
    /// Initial volume fraction per phase (must sum to 1).
    pub initial_alpha: Arc<dyn Fn(usize, [f64; 2]) -> f64 + Send + Sync>,
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub tau: f64,
    pub vel_degree: usize,
    pub p_degree: usize,
    pub transport_degree: usize,
    /// Quadrature exactness; 0 selects 2 * max(degree) + 6, high enough for
    /// the discrete skew-symmetry identities on curved cells.
    pub quad_exactness: usize,
    pub transport: TransportConfig,
    pub momentum_solver: SolverSettings,
    pub pressure_solver: SolverSettings,
    pub mass_solver: SolverSettings,
    /// Warn (via the step report flag) when alpha drops below this.
    pub alpha_min_warn: f64,
    /// Treat the full symmetric-gradient viscous term implicitly, coupling
    /// the velocity components of each phase into one block solve.
    pub implicit_viscous: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            tau: 0.1,
            vel_degree: 2,
            p_degree: 1,
            transport_degree: 1,
            quad_exactness: 0,
            transport: TransportConfig::default(),
            momentum_solver: SolverSettings::default(),
            pressure_solver: SolverSettings::default(),
            mass_solver: SolverSettings::default(),
            alpha_min_warn: 1e-6,
            implicit_viscous: false,
        }
    }
}

#[derive(Clone)]
pub struct FlowState {
    pub step: usize,
    pub t: f64,
    /// Transported variable coefficients per phase (transport space).
    pub phase_var: Vec<Vec<f64>>,
    /// Finite-element velocity per phase, component-blocked (2n).
    pub u: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    /// End-of-step velocity samples at quadrature points per phase.
    pub uhat_qp: Vec<Vec<[f64; 2]>>,
    /// L2-projection of the end-of-step velocity (output and drag).
    pub uhat: Vec<Vec<f64>>,
}

/// Norms and checks recorded for each step, used by the stability ledger
/// and the run diagnostics.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub step: usize,
    pub t: f64,
    /// Sum over phases of Psi at the old / new time level.
    pub psi_old: f64,
    pub psi_new: f64,
    /// tau * sum_k mu_k || sqrt(a^{n+1}) grad u^{n+1} + sqrt(a^n) grad^T u^n ||^2.
    pub visc_cross: f64,
    /// tau * sum_{k,l} || sqrt(drag) (uhat_k - uhat_l) ||^2 (both orders).
    pub drag_diss: f64,
    /// sum_k rho_k || sqrt(a^n) uhat^n ||^2 (right-hand side of the bound).
    pub weighted_uhat_old_sq: f64,
    /// max over pairs and points of drag / sqrt(rho_k rho_l a_k a_l).
    pub beta_step: f64,
    pub alpha_min: f64,
    pub alpha_low_warning: bool,
    /// l2 norm of the discrete divergence functional of the mean
    /// end-of-step velocity, and the scale it should be compared against.
    pub e_div: f64,
    pub e_div_scale: f64,
    /// mean L1 deviation of sum_k alpha_k from 1.
    pub partition_error: f64,
    pub kinetic_energy: f64,
}

pub struct Scheme {
    pub problem: Problem,
    pub cfg: SchemeConfig,
    pub asm: Assembler,
    pub vel_space: Space,
    pub p_space: Space,
    pub tr_space: Space,
    p_weights: Vec<f64>,
}

impl Scheme {
    pub fn new(problem: Problem, mut cfg: SchemeConfig) -> Result<Self> {
        if problem.phases.is_empty() {
            return Err(Error::InvalidInput("at least one phase required".into()));
        }
        for (k, ph) in problem.phases.iter().enumerate() {
            if !(ph.rho > 0.0) || !(ph.mu >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "phase {k}: density must be positive, viscosity non-negative"
                )));
            }
        }
        if !(cfg.tau > 0.0) {
            return Err(Error::InvalidInput("time-step size must be positive".into()));
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
        Ok(Scheme { problem, cfg, asm, vel_space, p_space, tr_space, p_weights })
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

    /// Volume fractions at quadrature points for the given variable coeffs.
    fn alpha_qp(&self, var: &[f64]) -> Vec<f64> {
        let f = self.cfg.transport.formulation;
        self.asm
            .eval_scalar(&self.tr_space, var)
            .into_iter()
            .map(|v| alpha_of(f, v))
            .collect()
    }

    /// Gradients of alpha at quadrature points (chain rule through the
    /// transported variable, exact for the polynomial composite).
    fn alpha_grad_qp(&self, var: &[f64]) -> Vec<[f64; 2]> {
        let f = self.cfg.transport.formulation;
        let v = self.asm.eval_scalar(&self.tr_space, var);
        let g = self.asm.eval_scalar_grad(&self.tr_space, var);
        (0..v.len())
            .map(|k| {
                let d = alpha_of_prime(f, v[k]);
                [d * g[k][0], d * g[k][1]]
            })
            .collect()
    }

    /// Clipped drag coefficients at quadrature points for each unordered
    /// pair (k, l), k < l, evaluated from the given alpha and velocity
    /// samples at time t.
    fn drag_qp(
        &self,
        t: f64,
        alpha: &[Vec<f64>],
        uhat: &[Vec<[f64; 2]>],
    ) -> Vec<Vec<f64>> {
        let m = self.n_phases();
        let nq = self.asm.x.len();
        let mut out = Vec::new();
        for k in 0..m {
            for l in (k + 1)..m {
                let mut g = Vec::with_capacity(nq);
                for q in 0..nq {
                    let a: Vec<f64> = (0..m).map(|j| alpha[j][q]).collect();
                    let uu: Vec<[f64; 2]> = (0..m).map(|j| uhat[j][q]).collect();
                    let raw = (self.problem.drag.gamma)(k, l, self.asm.x[q], t, &a, &uu);
                    g.push(clip_drag(raw, self.problem.drag.cap));
                }
                out.push(g);
            }
        }
        out
    }

    fn pair_index(&self, k: usize, l: usize) -> usize {
        let m = self.n_phases();
        let (k, l) = if k < l { (k, l) } else { (l, k) };
        // index of (k,l) in the lexicographic list of pairs
        k * m - k * (k + 1) / 2 + (l - k - 1)
    }

    /// Initial state: nodal interpolation of the initial data plus the
    /// Neumann pressure initialisation.
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
        let p = self.initialize_pressure(&phase_var, &u)?;
        let uhat_qp: Vec<Vec<[f64; 2]>> =
            u.iter().map(|uk| self.asm.eval_vector(&self.vel_space, uk)).collect();
        let uhat = u.clone();
        Ok(FlowState { step: 0, t: 0.0, phase_var, u, p, uhat_qp, uhat })
    }

    /// Solve the pure-Neumann problem for the initial pressure:
    /// < grad p0, (sum_k a_k / rho_k) grad q > = sum_k < f_k, grad q >,
    /// where f_k collects the convective, viscous, gravity and drag forces
    /// of the initial data.
    pub fn initialize_pressure(&self, phase_var: &[Vec<f64>], u: &[Vec<f64>]) -> Result<Vec<f64>> {
        let m = self.n_phases();
        let nq = self.asm.x.len();
        let alpha: Vec<Vec<f64>> = phase_var.iter().map(|v| self.alpha_qp(v)).collect();
        let galpha: Vec<Vec<[f64; 2]>> = phase_var.iter().map(|v| self.alpha_grad_qp(v)).collect();
        let uv: Vec<Vec<[f64; 2]>> =
            u.iter().map(|c| self.asm.eval_vector(&self.vel_space, c)).collect();
        let ug: Vec<Vec<[[f64; 2]; 2]>> =
            u.iter().map(|c| self.asm.eval_vector_grad(&self.vel_space, c)).collect();
        let uh: Vec<Vec<[[f64; 3]; 2]>> =
            u.iter().map(|c| self.asm.eval_vector_hessian(&self.vel_space, c)).collect();
        // drag evaluated from the initial data
        let drag = self.drag_qp(0.0, &alpha, &uv);

        // f = sum_k f_k at each quadrature point
        let mut f_qp = vec![[0.0; 2]; nq];
        for k in 0..m {
            let ph = &self.problem.phases[k];
            let nu = ph.mu / ph.rho;
            for q in 0..nq {
                let a = alpha[k][q];
                let ga = galpha[k][q];
                let v = uv[k][q];
                let g = ug[k][q];
                let h = uh[k][q];
                let div_u = g[0][0] + g[1][1];
                let div_au = a * div_u + ga[0] * v[0] + ga[1] * v[1];
                let grav = (ph.gravity)(self.asm.x[q], 0.0);
                for c in 0..2 {
                    // -div(a u (x) u)_c = -u_c div(a u) - a u . grad u_c
                    let conv = -v[c] * div_au - a * (v[0] * g[c][0] + v[1] * g[c][1]);
                    // div(2 nu a sym grad u)_c
                    //   = 2 nu [ a (lap u_c + d_c div u)/2 + grad a . sym(grad u)_c ]
                    let lap = h[c][0] + h[c][2];
                    // d/dx_c of div u: c = 0 -> u0_xx + u1_xy; c = 1 -> u0_xy + u1_yy
                    let ddiv = if c == 0 { h[0][0] + h[1][1] } else { h[0][1] + h[1][2] };
                    let sym_row = [
                        0.5 * (g[c][0] + g[0][c]),
                        0.5 * (g[c][1] + g[1][c]),
                    ];
                    let visc =
                        2.0 * nu * (0.5 * a * (lap + ddiv) + ga[0] * sym_row[0] + ga[1] * sym_row[1]);
                    let mut dragc = 0.0;
                    for l in 0..m {
                        if l == k {
                            continue;
                        }
                        let gkl = drag[self.pair_index(k, l)][q];
                        dragc += gkl * (uv[k][q][c] - uv[l][q][c]);
                    }
                    f_qp[q][c] += conv + visc + a * grav[c] - dragc / ph.rho;
                }
            }
        }
        // mobility sum_k a_k / rho_k
        let mob: Vec<f64> = (0..nq)
            .map(|q| (0..m).map(|k| alpha[k][q] / self.problem.phases[k].rho).sum())
            .collect();
        let a_mat = self.asm.matrix(&self.p_space, &self.p_space, |ctx, j, i| {
            mob[ctx.k] * (ctx.trial.grad[j][0] * ctx.test.grad[i][0]
                + ctx.trial.grad[j][1] * ctx.test.grad[i][1])
        });
        let b = self.asm.vector(&self.p_space, |ctx, i| {
            f_qp[ctx.k][0] * ctx.test.grad[i][0] + f_qp[ctx.k][1] * ctx.test.grad[i][1]
        });
        let p = solve_singular_neumann(&a_mat, &b, &self.p_weights, &self.cfg.pressure_solver)?;
        check_finite(&p, 0, "p0")?;
        Ok(p)
    }

    /// Advance one time step. Returns the new state and the step report.
    pub fn advance(&self, state: &FlowState) -> Result<(FlowState, StepReport)> {
        let m = self.n_phases();
        let tau = self.cfg.tau;
        let t_old = state.t;
        let t_new = t_old + tau;
        let nq = self.asm.x.len();
        let nv = self.vel_space.n_dofs;

        // ---- step 1: transport -------------------------------------------
        let mut phase_var_new = Vec::with_capacity(m);
        for k in 0..m {
            let v = step_transport(
                &self.asm,
                &self.tr_space,
                &self.vel_space,
                &state.u[k],
                &state.phase_var[k],
                tau,
                &self.cfg.transport,
            )?;
            check_finite(&v, state.step + 1, "volume fraction")?;
            phase_var_new.push(v);
        }

        // quadrature-point data
        let alpha_old: Vec<Vec<f64>> = state.phase_var.iter().map(|v| self.alpha_qp(v)).collect();
        let alpha_new: Vec<Vec<f64>> = phase_var_new.iter().map(|v| self.alpha_qp(v)).collect();
        let galpha_new: Vec<Vec<[f64; 2]>> =
            phase_var_new.iter().map(|v| self.alpha_grad_qp(v)).collect();
        let u_old_qp: Vec<Vec<[f64; 2]>> =
            state.u.iter().map(|c| self.asm.eval_vector(&self.vel_space, c)).collect();
        let gu_old_qp: Vec<Vec<[[f64; 2]; 2]>> =
            state.u.iter().map(|c| self.asm.eval_vector_grad(&self.vel_space, c)).collect();
        let gp_old_qp = self.asm.eval_scalar_grad(&self.p_space, &state.p);

        // ratio = sqrt(a^n / a^{n+1}) and sigma = sqrt(a^{n+1} a^n),
        // computed so that sigma = a^{n+1} * ratio exactly: this keeps the
        // pressure terms of the momentum, Poisson and projection steps
        // consistent pointwise.
        let mut ratio = vec![vec![0.0; nq]; m];
        let mut sigma = vec![vec![0.0; nq]; m];
        for k in 0..m {
            for q in 0..nq {
                let an = alpha_new[k][q];
                if an > 0.0 {
                    ratio[k][q] = (alpha_old[k][q].max(0.0) / an).sqrt();
                    sigma[k][q] = an * ratio[k][q];
                }
            }
        }

        let drag = self.drag_qp(t_old, &alpha_old, &state.uhat_qp);

        // ---- step 2: momentum --------------------------------------------
        let mut u_new: Vec<Vec<f64>> = Vec::with_capacity(m);
        for k in 0..m {
            let cs = self.velocity_constraints(k, t_new)?;
            let rhs = |c: usize| {
                self.asm.vector(&self.vel_space, |ctx, i| {
                    let ph = &self.problem.phases[k];
                    let q = ctx.k;
                    let ni = ctx.test.value[i];
                    let gi = ctx.test.grad[i];
                    let mut r = ph.rho / tau * alpha_old[k][q] * state.uhat_qp[k][q][c] * ni;
                    // explicit pressure: <p^n, div(sigma v)> = -<sigma grad p^n, v>
                    r -= sigma[k][q] * gp_old_qp[q][c] * ni;
                    if !self.cfg.implicit_viscous {
                        // -<mu sigma grad^T u^n, grad v>
                        let g = gu_old_qp[k][q];
                        r -= ph.mu * sigma[k][q] * (g[0][c] * gi[0] + g[1][c] * gi[1]);
                    }
                    let grav = (ph.gravity)(ctx.x, t_new);
                    r += ph.rho * alpha_new[k][q] * grav[c] * ni;
                    for l in 0..m {
                        if l == k {
                            continue;
                        }
                        let gkl = drag[self.pair_index(k, l)][q];
                        r -= gkl * (state.uhat_qp[k][q][c] - state.uhat_qp[l][q][c]) * ni;
                    }
                    r
                })
            };
            let uk = if self.cfg.implicit_viscous {
                self.momentum_block_solve(k, tau, &alpha_old[k], &alpha_new[k], &galpha_new[k],
                    &u_old_qp[k], &gu_old_qp[k], &rhs(0), &rhs(1), &cs)?
            } else {
                let base = self.momentum_matrix(k, tau, &alpha_old[k], &alpha_new[k],
                    &galpha_new[k], &u_old_qp[k], &gu_old_qp[k]);
                let mut out = vec![0.0; 2 * nv];
                for c in 0..2 {
                    let mut a = base.clone();
                    let mut b = rhs(c);
                    apply_constraints(&mut a, &mut b, &cs.comp[c]);
                    let sol = solve_nonsymmetric(&a, &b, &self.cfg.momentum_solver).map_err(
                        |e| Error::MomentumSolve { phase: k, component: c, source: Box::new(e) },
                    )?;
                    out[c * nv..(c + 1) * nv].copy_from_slice(&sol);
                }
                out
            };
            check_finite(&uk, state.step + 1, "velocity")?;
            u_new.push(uk);
        }
        let u_new_qp: Vec<Vec<[f64; 2]>> =
            u_new.iter().map(|c| self.asm.eval_vector(&self.vel_space, c)).collect();

        // ---- step 3: pressure --------------------------------------------
        let mob: Vec<f64> = (0..nq)
            .map(|q| (0..m).map(|k| alpha_new[k][q] / self.problem.phases[k].rho).sum())
            .collect();
        let a_ppe = self.asm.matrix(&self.p_space, &self.p_space, |ctx, j, i| {
            mob[ctx.k] * (ctx.trial.grad[j][0] * ctx.test.grad[i][0]
                + ctx.trial.grad[j][1] * ctx.test.grad[i][1])
        });
        let b_ppe = self.asm.vector(&self.p_space, |ctx, i| {
            let q = ctx.k;
            let gi = ctx.test.grad[i];
            let mut r = 0.0;
            for k in 0..m {
                let rho = self.problem.phases[k].rho;
                r += sigma[k][q] / rho * (gp_old_qp[q][0] * gi[0] + gp_old_qp[q][1] * gi[1]);
                r += alpha_new[k][q] / tau * (u_new_qp[k][q][0] * gi[0] + u_new_qp[k][q][1] * gi[1]);
            }
            r
        });
        let p_new = solve_singular_neumann(&a_ppe, &b_ppe, &self.p_weights, &self.cfg.pressure_solver)?;
        check_finite(&p_new, state.step + 1, "pressure")?;
        let gp_new_qp = self.asm.eval_scalar_grad(&self.p_space, &p_new);

        // ---- step 4: projection ------------------------------------------
        let mut uhat_qp_new = Vec::with_capacity(m);
        for k in 0..m {
            let rho = self.problem.phases[k].rho;
            let mut s = Vec::with_capacity(nq);
            for q in 0..nq {
                let mut v = [0.0; 2];
                for c in 0..2 {
                    v[c] = u_new_qp[k][q][c]
                        + tau / rho * (ratio[k][q] * gp_old_qp[q][c] - gp_new_qp[q][c]);
                }
                s.push(v);
            }
            uhat_qp_new.push(s);
        }
        // projected counterpart: alpha-weighted mass solve per component
        let mut uhat_new = Vec::with_capacity(m);
        for k in 0..m {
            let amin = alpha_new[k].iter().cloned().fold(f64::INFINITY, f64::min);
            if !(amin > 0.0) {
                return Err(Error::SingularWeightedMass);
            }
            let mass = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
                alpha_new[k][ctx.k] * ctx.trial.value[j] * ctx.test.value[i]
            });
            let mut out = vec![0.0; 2 * nv];
            for c in 0..2 {
                let b = self.asm.vector(&self.vel_space, |ctx, i| {
                    alpha_new[k][ctx.k] * uhat_qp_new[k][ctx.k][c] * ctx.test.value[i]
                });
                let sol = solve_spd(&mass, &b, &self.cfg.mass_solver)?;
                out[c * nv..(c + 1) * nv].copy_from_slice(&sol);
            }
            check_finite(&out, state.step + 1, "end-of-step velocity")?;
            uhat_new.push(out);
        }

        // ---- diagnostics ---------------------------------------------------
        let report = self.step_report(
            state, tau, t_new, &phase_var_new, &alpha_old, &alpha_new, &gu_old_qp,
            &gp_old_qp, &u_new, &gp_new_qp, &uhat_qp_new, &drag, &b_ppe,
        );

        let new_state = FlowState {
            step: state.step + 1,
            t: t_new,
            phase_var: phase_var_new,
            u: u_new,
            p: p_new,
            uhat_qp: uhat_qp_new,
            uhat: uhat_new,
        };
        Ok((new_state, report))
    }

    /// Scalar momentum operator shared by both velocity components:
    /// rho (a^{n+1}+a^n)/(2 tau) u + rho a^{n+1} (u^n . grad) u
    /// + rho/2 div(a^{n+1} u^n) u + mu a^{n+1} grad u . grad v.
    fn momentum_matrix(
        &self,
        k: usize,
        tau: f64,
        alpha_old: &[f64],
        alpha_new: &[f64],
        galpha_new: &[[f64; 2]],
        u_old_qp: &[[f64; 2]],
        gu_old_qp: &[[[f64; 2]; 2]],
    ) -> CsrMatrix {
        let ph = &self.problem.phases[k];
        self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
            let q = ctx.k;
            let nj = ctx.trial.value[j];
            let gj = ctx.trial.grad[j];
            let ni = ctx.test.value[i];
            let gi = ctx.test.grad[i];
            let uo = u_old_qp[q];
            let div_u = gu_old_qp[q][0][0] + gu_old_qp[q][1][1];
            let div_au =
                alpha_new[q] * div_u + galpha_new[q][0] * uo[0] + galpha_new[q][1] * uo[1];
            ph.rho * (alpha_new[q] + alpha_old[q]) / (2.0 * tau) * nj * ni
                + ph.rho * alpha_new[q] * (uo[0] * gj[0] + uo[1] * gj[1]) * ni
                + 0.5 * ph.rho * div_au * nj * ni
                + ph.mu * alpha_new[q] * (gj[0] * gi[0] + gj[1] * gi[1])
        })
    }

    /// Momentum with the symmetric-gradient viscous term fully implicit:
    /// one coupled solve for both components of phase k.
    #[allow(clippy::too_many_arguments)]
    fn momentum_block_solve(
        &self,
        k: usize,
        tau: f64,
        alpha_old: &[f64],
        alpha_new: &[f64],
        galpha_new: &[[f64; 2]],
        u_old_qp: &[[f64; 2]],
        gu_old_qp: &[[[f64; 2]; 2]],
        b0: &[f64],
        b1: &[f64],
        cs: &VectorConstraints,
    ) -> Result<Vec<f64>> {
        let ph = &self.problem.phases[k];
        let nv = self.vel_space.n_dofs;
        // non-viscous scalar part (diagonal blocks)
        let base = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
            let q = ctx.k;
            let uo = u_old_qp[q];
            let div_u = gu_old_qp[q][0][0] + gu_old_qp[q][1][1];
            let div_au =
                alpha_new[q] * div_u + galpha_new[q][0] * uo[0] + galpha_new[q][1] * uo[1];
            ph.rho * (alpha_new[q] + alpha_old[q]) / (2.0 * tau) * ctx.trial.value[j]
                * ctx.test.value[i]
                + ph.rho * alpha_new[q] * (uo[0] * ctx.trial.grad[j][0] + uo[1] * ctx.trial.grad[j][1])
                    * ctx.test.value[i]
                + 0.5 * ph.rho * div_au * ctx.trial.value[j] * ctx.test.value[i]
        });
        let mut tb = TripletBuilder::new(2 * nv, 2 * nv);
        for c in 0..2 {
            tb.push_block(c * nv, c * nv, &base, 1.0);
            for b in 0..2 {
                // 2 mu a sym(grad u) : grad v -> block (c,b)
                let visc = self.asm.matrix(&self.vel_space, &self.vel_space, |ctx, j, i| {
                    let q = ctx.k;
                    let gj = ctx.trial.grad[j];
                    let gi = ctx.test.grad[i];
                    let mut v = gj[c] * gi[b];
                    if c == b {
                        v += gj[0] * gi[0] + gj[1] * gi[1];
                    }
                    ph.mu * alpha_new[q] * v
                });
                tb.push_block(c * nv, b * nv, &visc, 1.0);
            }
        }
        let mut a = tb.build();
        let mut b: Vec<f64> = b0.iter().chain(b1.iter()).copied().collect();
        // shift the component-1 constraints into the block numbering
        let mut pairs: Vec<(usize, f64)> = cs.comp[0]
            .dofs
            .iter()
            .zip(&cs.comp[0].values)
            .map(|(&d, &g)| (d, g))
            .collect();
        pairs.extend(cs.comp[1].dofs.iter().zip(&cs.comp[1].values).map(|(&d, &g)| (nv + d, g)));
        let full = ConstraintSet::from_pairs(pairs);
        apply_constraints(&mut a, &mut b, &full);
        solve_nonsymmetric(&a, &b, &self.cfg.momentum_solver)
            .map_err(|e| Error::MomentumSolve { phase: k, component: 2, source: Box::new(e) })
    }

    #[allow(clippy::too_many_arguments)]
    fn step_report(
        &self,
        state: &FlowState,
        tau: f64,
        t_new: f64,
        phase_var_new: &[Vec<f64>],
        alpha_old: &[Vec<f64>],
        alpha_new: &[Vec<f64>],
        gu_old_qp: &[Vec<[[f64; 2]; 2]>],
        gp_old_qp: &[[f64; 2]],
        u_new: &[Vec<f64>],
        gp_new_qp: &[[f64; 2]],
        uhat_qp_new: &[Vec<[f64; 2]>],
        drag: &[Vec<f64>],
        b_ppe: &[f64],
    ) -> StepReport {
        let m = self.n_phases();
        let nq = self.asm.x.len();
        let gu_new_qp: Vec<Vec<[[f64; 2]; 2]>> =
            u_new.iter().map(|c| self.asm.eval_vector_grad(&self.vel_space, c)).collect();

        let mut psi_old = 0.0;
        let mut psi_new = 0.0;
        let mut visc_cross = 0.0;
        let mut weighted_uhat_old_sq = 0.0;
        let mut kinetic = 0.0;
        for k in 0..m {
            let ph = &self.problem.phases[k];
            psi_old += self.psi_phase(
                ph, tau, &alpha_old[k], &state.uhat_qp[k], &gu_old_qp[k], gp_old_qp,
            );
            psi_new += self.psi_phase(
                ph, tau, &alpha_new[k], &uhat_qp_new[k], &gu_new_qp[k], gp_new_qp,
            );
            visc_cross += tau
                * ph.mu
                * self.asm.integral(|_, _, q, _| {
                    let sn = alpha_new[k][q].max(0.0).sqrt();
                    let so = alpha_old[k][q].max(0.0).sqrt();
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for d in 0..2 {
                            // grad u^{n+1} + transpose(grad u^n), alpha-weighted
                            let v = sn * gu_new_qp[k][q][c][d] + so * gu_old_qp[k][q][d][c];
                            acc += v * v;
                        }
                    }
                    acc
                });
            weighted_uhat_old_sq += ph.rho
                * self.asm.integral(|_, _, q, _| {
                    let uh = state.uhat_qp[k][q];
                    alpha_old[k][q] * (uh[0] * uh[0] + uh[1] * uh[1])
                });
            kinetic += 0.5
                * ph.rho
                * self.asm.integral(|_, _, q, _| {
                    let uh = uhat_qp_new[k][q];
                    alpha_new[k][q] * (uh[0] * uh[0] + uh[1] * uh[1])
                });
        }

        let mut drag_diss = 0.0;
        let mut beta_step = 0.0f64;
        for k in 0..m {
            for l in (k + 1)..m {
                let g = &drag[self.pair_index(k, l)];
                let rr = (self.problem.phases[k].rho * self.problem.phases[l].rho).sqrt();
                drag_diss += 2.0
                    * tau
                    * self.asm.integral(|_, _, q, _| {
                        let du = [
                            state.uhat_qp[k][q][0] - state.uhat_qp[l][q][0],
                            state.uhat_qp[k][q][1] - state.uhat_qp[l][q][1],
                        ];
                        g[q] * (du[0] * du[0] + du[1] * du[1])
                    });
                for q in 0..nq {
                    if g[q] > 0.0 {
                        let aa = (alpha_old[k][q] * alpha_old[l][q]).max(0.0).sqrt();
                        beta_step = beta_step.max(g[q] / (rr * aa));
                    }
                }
            }
        }

        // divergence functional of the mean end-of-step velocity, assembled
        // directly as an independent check of the projection identity
        let fdiv = self.asm.vector(&self.p_space, |ctx, i| {
            let q = ctx.k;
            let gi = ctx.test.grad[i];
            let mut r = 0.0;
            for k in 0..m {
                r += alpha_new[k][q] * (uhat_qp_new[k][q][0] * gi[0] + uhat_qp_new[k][q][1] * gi[1]);
            }
            r
        });
        let e_div = fdiv.iter().map(|v| v * v).sum::<f64>().sqrt();
        // the functional equals tau times the pressure-solve residual, so
        // compare against tau * (solver target)
        let bnorm = b_ppe.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e_div_scale = tau * self.cfg.pressure_solver.rel_tol * bnorm;

        let partition_error = self.asm.integral(|_, _, q, _| {
            let s: f64 = (0..m).map(|k| alpha_new[k][q]).sum();
            (s - 1.0).abs()
        }) / self.asm.domain_area();

        let mut alpha_min = f64::INFINITY;
        for k in 0..m {
            for q in 0..nq {
                alpha_min = alpha_min.min(alpha_new[k][q]);
            }
            let f = self.cfg.transport.formulation;
            for &v in &phase_var_new[k] {
                alpha_min = alpha_min.min(alpha_of(f, v));
            }
        }

        StepReport {
            step: state.step + 1,
            t: t_new,
            psi_old,
            psi_new,
            visc_cross,
            drag_diss,
            weighted_uhat_old_sq,
            beta_step,
            alpha_min,
            alpha_low_warning: alpha_min < self.cfg.alpha_min_warn,
            e_div,
            e_div_scale,
            partition_error,
            kinetic_energy: kinetic,
        }
    }

    /// Psi = rho ||sqrt(a) uhat||^2 + tau mu ||sqrt(a) grad u||^2
    ///       + tau^2/rho ||sqrt(a) grad p||^2 for one phase.
    fn psi_phase(
        &self,
        ph: &PhaseParams,
        tau: f64,
        alpha: &[f64],
        uhat_qp: &[[f64; 2]],
        gu_qp: &[[[f64; 2]; 2]],
        gp_qp: &[[f64; 2]],
    ) -> f64 {
        let t1 = ph.rho
            * self.asm.integral(|_, _, q, _| {
                alpha[q] * (uhat_qp[q][0] * uhat_qp[q][0] + uhat_qp[q][1] * uhat_qp[q][1])
            });
        let t2 = tau
            * ph.mu
            * self.asm.integral(|_, _, q, _| {
                let g = gu_qp[q];
                alpha[q]
                    * (g[0][0] * g[0][0] + g[0][1] * g[0][1] + g[1][0] * g[1][0]
                        + g[1][1] * g[1][1])
            });
        let t3 = tau * tau / ph.rho
            * self.asm.integral(|_, _, q, _| {
                alpha[q] * (gp_qp[q][0] * gp_qp[q][0] + gp_qp[q][1] * gp_qp[q][1])
            });
        t1 + t2 + t3
    }

    /// Stability functional of the initial data with the drag-dependent
    /// prefactor: sum_k B_k with the supplied drag bound, minimum density
    /// and volume-fraction floor.
    pub fn initial_bound(&self, state: &FlowState, alpha_min: f64) -> f64 {
        let m = self.n_phases();
        let tau = self.cfg.tau;
        let rho_min =
            self.problem.phases.iter().map(|p| p.rho).fold(f64::INFINITY, f64::min);
        let dcap = self.problem.drag.cap;
        let pref = 1.0 + (2.0 * dcap * (m as f64 - 1.0) * tau / (rho_min * alpha_min)).powi(2);
        let gp0 = self.asm.eval_scalar_grad(&self.p_space, &state.p);
        let mut b = 0.0;
        for k in 0..m {
            let ph = &self.problem.phases[k];
            let a0 = self.alpha_qp(&state.phase_var[k]);
            let u0 = self.asm.eval_vector(&self.vel_space, &state.u[k]);
            let g0 = self.asm.eval_vector_grad(&self.vel_space, &state.u[k]);
            b += pref
                * ph.rho
                * self.asm.integral(|_, _, q, _| a0[q] * (u0[q][0] * u0[q][0] + u0[q][1] * u0[q][1]));
            b += tau
                * ph.mu
                * self.asm.integral(|_, _, q, _| {
                    let g = g0[q];
                    a0[q]
                        * (g[0][0] * g[0][0] + g[0][1] * g[0][1] + g[1][0] * g[1][0]
                            + g[1][1] * g[1][1])
                });
            b += tau * tau / ph.rho
                * self.asm.integral(|_, _, q, _| {
                    a0[q] * (gp0[q][0] * gp0[q][0] + gp0[q][1] * gp0[q][1])
                });
        }
        b
    }
}

/// Derivative of `alpha_of` with respect to the transported variable.
pub fn alpha_of_prime(formulation: TransportFormulation, v: f64) -> f64 {
    match formulation {
        TransportFormulation::SqrtVariable => 2.0 * v,
        TransportFormulation::BoundedVariable => {
            let d = 1.0 + v.abs();
            2.0 * v / (d * d * d)
        }
        TransportFormulation::RawVariable => 1.0,
    }
}

fn check_finite(v: &[f64], step: usize, field: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, field: field.into() })
    }
}

/// Running stability ledger over a whole simulation, tracking the
/// per-step inequality and the cumulative exponential bound.
#[derive(Clone, Debug, Default)]
pub struct StabilityLedger {
    pub m_phases: usize,
    pub tau: f64,
    pub beta_run: f64,
    /// cumulative dissipation sum of the per-step left-hand sides.
    pub dissipation_sum: f64,
    pub psi_initial: f64,
    pub alpha_min_run: f64,
    pub steps: usize,
    /// largest positive per-step inequality residual, and its scale.
    pub max_residual: f64,
    pub max_scale: f64,
}

impl StabilityLedger {
    pub fn new(m_phases: usize, tau: f64, psi_initial: f64) -> Self {
        StabilityLedger {
            m_phases,
            tau,
            psi_initial,
            alpha_min_run: f64::INFINITY,
            ..Default::default()
        }
    }

    /// Per-step inequality: psi_new - psi_old + dissipation terms must not
    /// exceed [2 tau (M-1) beta]^2 * sum rho ||sqrt(a^n) uhat^n||^2.
    /// Returns (residual, scale).
    pub fn record(&mut self, r: &StepReport) -> (f64, f64) {
        self.steps += 1;
        self.beta_run = self.beta_run.max(r.beta_step);
        self.alpha_min_run = self.alpha_min_run.min(r.alpha_min);
        self.dissipation_sum += r.visc_cross + r.drag_diss;
        let m1 = (self.m_phases as f64 - 1.0).max(0.0);
        let coef = (2.0 * self.tau * m1 * self.beta_run).powi(2);
        let lhs = r.psi_new - r.psi_old + r.visc_cross + r.drag_diss;
        let rhs = coef * r.weighted_uhat_old_sq;
        let scale = r.psi_new.abs().max(r.psi_old.abs()).max(r.visc_cross).max(r.drag_diss)
            .max(rhs)
            .max(1e-300);
        ((lhs - rhs).max(0.0), scale)
    }

    /// Cumulative bound: psi^N + dissipation <= B * exp(4 [D(M-1)/(rho_min
    /// alpha_min)]^2 T tau) where B comes from `Scheme::initial_bound`.
    pub fn gronwall_bound(&self, b_initial: f64, drag_cap: f64, rho_min: f64, alpha_min: f64, t_final: f64) -> f64 {
        let m1 = (self.m_phases as f64 - 1.0).max(0.0);
        let rate = 4.0 * (drag_cap * m1 / (rho_min * alpha_min)).powi(2) * t_final * self.tau;
        b_initial * rate.exp()
    }
}
