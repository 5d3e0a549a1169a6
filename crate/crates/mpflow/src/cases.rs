//! Benchmark problem setups: two closed-form rotating-flow cases used for
//! convergence studies, a two-layer buoyancy (Rayleigh-Taylor style)
//! configuration, and a counter-rotating disk used for stability checks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh;
use crate::scheme::{DragModel, PhaseParams, Problem, SchemeConfig, VelocityBc};
use crate::transport::{TransportConfig, TransportFormulation};

/// Closed-form reference fields for a benchmark with a known solution.
#[derive(Clone)]
pub struct ExactSolution {
    /// Pressure (defined up to a constant).
    pub pressure: Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>,
    /// Velocity per phase.
    pub velocity: Arc<dyn Fn(usize, [f64; 2], f64) -> [f64; 2] + Send + Sync>,
    /// Gradient of the relative velocity u_1 - u_0 (row c = grad of
    /// component c), the field whose H1-seminorm error is tracked.
    pub rel_velocity_grad: Arc<dyn Fn([f64; 2], f64) -> [[f64; 2]; 2] + Send + Sync>,
}

#[derive(Clone)]
pub struct CaseSetup {
    pub name: &'static str,
    pub problem: Problem,
    pub cfg: SchemeConfig,
    pub t_end: f64,
    pub exact: Option<ExactSolution>,
}

pub const CASE_NAMES: [&str; 4] =
    ["disk-linear-drag", "annulus-graded-drag", "two-layer-buoyancy", "counter-rotating-disk"];

pub fn by_name(name: &str, level: usize) -> Result<CaseSetup> {
    match name {
        "disk-linear-drag" => case_disk_linear_drag(level),
        "annulus-graded-drag" => case_annulus_graded_drag(level),
        "two-layer-buoyancy" => case_two_layer_buoyancy(level),
        "counter-rotating-disk" => case_counter_rotating_disk(0.1),
        _ => Err(Error::InvalidInput(format!(
            "unknown case '{name}'; available: {}",
            CASE_NAMES.join(", ")
        ))),
    }
}

/// Two counter-rotating phases on the unit disk with a time-decaying
/// rotation f(t) = 1/(1+t) and drag gamma = 1/(4(1+t)). Both phases have
/// unit density and viscosity and fraction 1/2; the exact pressure is
/// f^2 (r^2/2 - 1/4).
pub fn case_disk_linear_drag(level: usize) -> Result<CaseSetup> {
    let scale = 1usize << level;
    let m = Arc::new(mesh::build_disk(3 * scale, 4 * scale, 1.0)?);
    let f = |t: f64| 1.0 / (1.0 + t);
    let exact_u = move |k: usize, x: [f64; 2], t: f64| -> [f64; 2] {
        let s = if k == 0 { 1.0 } else { -1.0 };
        [-s * f(t) * x[1], s * f(t) * x[0]]
    };
    let problem = Problem {
        mesh: m,
        phases: vec![PhaseParams::new(1.0, 1.0), PhaseParams::new(1.0, 1.0)],
        drag: DragModel {
            cap: 1e6,
            gamma: Arc::new(move |_, _, _, t, _, _| 0.25 * f(t)),
        },
        velocity_bcs: vec![VelocityBc::Dirichlet {
            markers: vec!["boundary".into()],
            value: Arc::new(move |k, x, t| exact_u(k, x, t)),
        }],
        initial_velocity: Arc::new(move |k, x| exact_u(k, x, 0.0)),
        initial_alpha: Arc::new(|_, _| 0.5),
    };
    let cfg = SchemeConfig { tau: 0.1 / scale as f64, ..Default::default() };
    Ok(CaseSetup {
        name: "disk-linear-drag",
        problem,
        cfg,
        t_end: 0.4,
        exact: Some(ExactSolution {
            pressure: Arc::new(move |x, t| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                f(t) * f(t) * (0.5 * r2 - 0.25)
            }),
            velocity: Arc::new(exact_u),
            rel_velocity_grad: Arc::new(move |_, t| {
                // u_1 - u_0 = (2 f y, -2 f x)
                [[0.0, 2.0 * f(t)], [-2.0 * f(t), 0.0]]
            }),
        }),
    })
}

/// Rotating flow on an annulus r in [1/4, 3/4] with radially graded
/// fractions alpha_0 = r, alpha_1 = 1 - r, densities 1 and 4, drag 2 f r,
/// and a body force on the second phase that closes the balance. Uses the
/// printed element pairing of the study it reproduces: bilinear velocity
/// with biquadratic pressure.
pub fn case_annulus_graded_drag(level: usize) -> Result<CaseSetup> {
    let scale = 1usize << level;
    let m = Arc::new(mesh::build_annulus(2 * scale, 8 * scale, 0.25, 0.75)?);
    let f = |t: f64| 1.0 / (1.0 + t);
    let exact_u = move |k: usize, x: [f64; 2], t: f64| -> [f64; 2] {
        let s = if k == 0 { 1.0 } else { 0.5 };
        [-s * f(t) * x[1], s * f(t) * x[0]]
    };
    let problem = Problem {
        mesh: m,
        phases: vec![
            PhaseParams::new(1.0, 1.0),
            PhaseParams {
                rho: 4.0,
                mu: 4.0,
                gravity: Arc::new(move |x: [f64; 2], t: f64| {
                    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                    let c = 0.25 * f(t) * f(t) * (2.0 - r) / (1.0 - r);
                    [c * x[1], -c * x[0]]
                }),
            },
        ],
        drag: DragModel {
            cap: 1e6,
            gamma: Arc::new(move |_, _, x, t, _, _| {
                2.0 * f(t) * (x[0] * x[0] + x[1] * x[1]).sqrt()
            }),
        },
        velocity_bcs: vec![VelocityBc::Dirichlet {
            markers: vec!["inner".into(), "outer".into()],
            value: Arc::new(move |k, x, t| exact_u(k, x, t)),
        }],
        initial_velocity: Arc::new(move |k, x| exact_u(k, x, 0.0)),
        initial_alpha: Arc::new(|k, x| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if k == 0 {
                r
            } else {
                1.0 - r
            }
        }),
    };
    let cfg = SchemeConfig {
        tau: 0.1 / scale as f64,
        vel_degree: 1,
        p_degree: 2,
        ..Default::default()
    };
    Ok(CaseSetup {
        name: "annulus-graded-drag",
        problem,
        cfg,
        t_end: 0.4,
        exact: Some(ExactSolution {
            pressure: Arc::new(move |x, t| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                f(t) * f(t) * (0.5 * r2 - 5.0 / 32.0)
            }),
            velocity: Arc::new(exact_u),
            rel_velocity_grad: Arc::new(move |_, t| {
                // u_1 - u_0 = (f y / 2, -f x / 2)
                [[0.0, 0.5 * f(t)], [-0.5 * f(t), 0.0]]
            }),
        }),
    })
}

/// Heavy-over-light two-layer configuration on (0, 0.5) x (-2, 2) with a
/// smoothed interface, gravity (0, -1), velocity-proportional drag, free
/// slip on the lateral walls and no slip on top and bottom. Volume
/// fractions use the bounded transported variable.
pub fn case_two_layer_buoyancy(level: usize) -> Result<CaseSetup> {
    let nx = 8 * (1usize << level);
    let m = Arc::new(mesh::build_rectangle(
        nx,
        8 * nx,
        (0.0, 0.5),
        (-2.0, 2.0),
        ["bottom", "right", "top", "left"],
    )?);
    let alpha2 = |x: [f64; 2]| -> f64 {
        0.5 * (0.99 + 0.05)
            + 0.5 * (0.99 - 0.05) * (40.0 * x[1] + 4.0 * (2.0 * std::f64::consts::PI * x[0]).cos()).tanh()
    };
    let problem = Problem {
        mesh: m,
        phases: vec![
            PhaseParams {
                rho: 1.0,
                mu: 0.1,
                gravity: Arc::new(|_, _| [0.0, -1.0]),
            },
            PhaseParams {
                rho: 3.0,
                mu: 0.3,
                gravity: Arc::new(|_, _| [0.0, -1.0]),
            },
        ],
        drag: DragModel {
            cap: 1e6,
            gamma: Arc::new(|_, _, _, _, a, u| {
                let du = [u[1][0] - u[0][0], u[1][1] - u[0][1]];
                10.0 * a[1] * (du[0] * du[0] + du[1] * du[1]).sqrt()
            }),
        },
        velocity_bcs: vec![
            VelocityBc::Dirichlet {
                markers: vec!["bottom".into(), "top".into()],
                value: Arc::new(|_, _, _| [0.0, 0.0]),
            },
            VelocityBc::FreeSlip { markers: vec!["left".into(), "right".into()] },
        ],
        initial_velocity: Arc::new(|_, _| [0.0, 0.0]),
        initial_alpha: Arc::new(move |k, x| {
            let a2 = alpha2(x);
            if k == 1 {
                a2
            } else {
                1.0 - a2
            }
        }),
    };
    let cfg = SchemeConfig {
        tau: 0.005,
        transport_degree: 2,
        transport: TransportConfig {
            formulation: TransportFormulation::BoundedVariable,
            ..Default::default()
        },
        ..Default::default()
    };
    Ok(CaseSetup { name: "two-layer-buoyancy", problem, cfg, t_end: 1.0, exact: None })
}

/// Counter-rotating phases on a coarse unit disk with velocity-dependent
/// drag clipped at 1: the configuration used to exercise the per-step
/// stability inequality for large time steps.
pub fn case_counter_rotating_disk(tau: f64) -> Result<CaseSetup> {
    let m = Arc::new(mesh::build_disk(3, 4, 1.0)?);
    let problem = Problem {
        mesh: m,
        phases: vec![PhaseParams::new(1.0, 1.0), PhaseParams::new(1.0, 1.0)],
        drag: DragModel {
            cap: 1.0,
            gamma: Arc::new(|_, _, _, _, _, u| {
                let du = [u[1][0] - u[0][0], u[1][1] - u[0][1]];
                5.0 * (du[0] * du[0] + du[1] * du[1]).sqrt()
            }),
        },
        velocity_bcs: vec![VelocityBc::Dirichlet {
            markers: vec!["boundary".into()],
            value: Arc::new(|_, _, _| [0.0, 0.0]),
        }],
        initial_velocity: Arc::new(|k, x| {
            let s = if k == 0 { 1.0 } else { -1.0 };
            let w = 1.0 - x[0] * x[0] - x[1] * x[1];
            [-s * w * x[1], s * w * x[0]]
        }),
        initial_alpha: Arc::new(|_, _| 0.5),
    };
    let cfg = SchemeConfig { tau, ..Default::default() };
    Ok(CaseSetup { name: "counter-rotating-disk", problem, cfg, t_end: 1.0, exact: None })
}
