use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mpflow::cases::{self, CaseSetup};
use mpflow::diagnostics::{
    fit_order, scalar_error_l2_zero_mean, velocity_diff_h1_error, write_timeseries, TimeSeriesRow,
};
use mpflow::monolithic::MonolithicScheme;
use mpflow::scheme::{FlowState, Scheme, StabilityLedger};
use mpflow::solvers::SolverSettings;
use mpflow::transport::{alpha_of, TransportFormulation};
use mpflow::vtk::{sample_scalar_at_nodes, sample_vector_at_nodes, write_legacy_vtk};

/// Finite-element simulator for dispersed incompressible multiphase flow.
#[derive(Parser)]
#[command(name = "mpflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-step a benchmark case and write time series, stability ledger
    /// and VTK snapshots.
    Run(RunArgs),
    /// Run a closed-form benchmark over a range of refinement levels and
    /// report the observed convergence orders.
    Converge(ConvergeArgs),
    /// Advance the segregated scheme and the coupled reference side by side
    /// and report how far they drift apart.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Benchmark case name.
    #[arg(long, default_value = "disk-linear-drag")]
    case: String,
    /// Mesh/time refinement level.
    #[arg(long, default_value_t = 0)]
    level: usize,
    /// Optional config file with one key = value pair per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory root (default: $MPFLOW_OUTPUT_ROOT or ./output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pin the solver to one thread for bit-identical reruns.
    #[arg(long)]
    deterministic: bool,
    /// Trailing key=value overrides (tau, t_end, vtk_every, transport,
    /// chi, rel_tol, implicit_viscous).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of refinement levels, starting at --level.
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of steps to advance both schemes.
    #[arg(long, default_value_t = 10)]
    steps: usize,
}

fn parse_kv(text: &str, map: &mut BTreeMap<String, String>) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key = value, got '{raw}'", lineno + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &CommonArgs) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_kv(&text, &mut values)?;
        }
        for ov in &common.overrides {
            parse_kv(ov, &mut values)?;
        }
        Ok(Settings { values })
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => Ok(Some(v.parse().with_context(|| format!("{key} = {v}"))?)),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => Ok(Some(v.parse().with_context(|| format!("{key} = {v}"))?)),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => Ok(Some(v.parse().with_context(|| format!("{key} = {v}"))?)),
        }
    }

    fn apply(&self, case: &mut CaseSetup) -> Result<()> {
        if let Some(tau) = self.f64("tau")? {
            case.cfg.tau = tau;
        }
        if let Some(te) = self.f64("t_end")? {
            case.t_end = te;
        }
        if let Some(chi) = self.f64("chi")? {
            case.cfg.transport.chi = chi;
        }
        if let Some(tol) = self.f64("rel_tol")? {
            let s = SolverSettings { rel_tol: tol, ..Default::default() };
            case.cfg.momentum_solver = s.clone();
            case.cfg.pressure_solver = s.clone();
            case.cfg.mass_solver = s;
        }
        if let Some(iv) = self.bool("implicit_viscous")? {
            case.cfg.implicit_viscous = iv;
        }
        if let Some(t) = self.values.get("transport") {
            case.cfg.transport.formulation = match t.as_str() {
                "sqrt" => TransportFormulation::SqrtVariable,
                "bounded" => TransportFormulation::BoundedVariable,
                "raw" => TransportFormulation::RawVariable,
                other => bail!("unknown transport formulation '{other}' (sqrt|bounded|raw)"),
            };
        }
        Ok(())
    }
}

fn output_dir(common: &CommonArgs, label: &str) -> Result<PathBuf> {
    let root = common
        .out
        .clone()
        .or_else(|| std::env::var_os("MPFLOW_OUTPUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"));
    let dir = root.join(label);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn setup(common: &CommonArgs) -> Result<(CaseSetup, Settings)> {
    if common.deterministic {
        // single-threaded execution; ignore the error if a pool exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let mut case = cases::by_name(&common.case, common.level).map_err(|e| anyhow::anyhow!("{e}"))?;
    let settings = Settings::load(common)?;
    settings.apply(&mut case)?;
    Ok((case, settings))
}

fn write_snapshot(
    dir: &Path,
    step: usize,
    scheme: &Scheme,
    state: &FlowState,
) -> Result<()> {
    let mesh = &scheme.problem.mesh;
    let mut scalars: Vec<(String, Vec<f64>)> = Vec::new();
    let p = sample_scalar_at_nodes(mesh, &scheme.p_space, &state.p);
    scalars.push(("pressure".into(), p));
    for k in 0..scheme.n_phases() {
        let var = sample_scalar_at_nodes(mesh, &scheme.tr_space, &state.phase_var[k]);
        let f = scheme.cfg.transport.formulation;
        scalars.push((format!("alpha_{k}"), var.iter().map(|&v| alpha_of(f, v)).collect()));
    }
    let mut vectors: Vec<(String, Vec<[f64; 2]>)> = Vec::new();
    for k in 0..scheme.n_phases() {
        vectors.push((
            format!("velocity_{k}"),
            sample_vector_at_nodes(mesh, &scheme.vel_space, &state.uhat[k]),
        ));
    }
    let sc: Vec<(&str, &[f64])> = scalars.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let vc: Vec<(&str, &[[f64; 2]])> =
        vectors.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let path = dir.join(format!("snapshot_{step:06}.vtk"));
    write_legacy_vtk(&path, mesh, &sc, &vc)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (case, settings) = setup(&args.common)?;
    let vtk_every = settings.usize("vtk_every")?.unwrap_or(10);
    let dir = output_dir(&args.common, case.name)?;
    let scheme = Scheme::new(case.problem.clone(), case.cfg.clone())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut state = scheme.initial_state().map_err(|e| anyhow::anyhow!("{e}"))?;
    let n = (case.t_end / scheme.cfg.tau).round().max(1.0) as usize;
    println!(
        "case {} level {}: {} steps of tau = {}, {} elements",
        case.name,
        args.common.level,
        n,
        scheme.cfg.tau,
        scheme.problem.mesh.elements.len()
    );
    let psi0 = scheme.initial_bound(&state, 0.5);
    let mut ledger = StabilityLedger::new(scheme.n_phases(), scheme.cfg.tau, psi0);
    let mut rows = Vec::with_capacity(n);
    let mut ledger_rows = Vec::with_capacity(n);
    write_snapshot(&dir, 0, &scheme, &state)?;
    for i in 1..=n {
        let (next, rep) = scheme.advance(&state).map_err(|e| anyhow::anyhow!("{e}"))?;
        let (residual, scale) = ledger.record(&rep);
        if rep.alpha_low_warning {
            eprintln!("step {i}: minimum volume fraction {:.3e}", rep.alpha_min);
        }
        rows.push(TimeSeriesRow::from_report(&rep, residual));
        ledger_rows.push(format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            rep.step,
            rep.t,
            rep.psi_old,
            rep.psi_new,
            rep.visc_cross,
            rep.drag_diss,
            rep.beta_step,
            residual,
            scale
        ));
        if i % vtk_every == 0 || i == n {
            write_snapshot(&dir, i, &scheme, &next)?;
        }
        state = next;
    }
    write_timeseries(&dir.join("timeseries.csv"), &rows)?;
    let mut ledger_csv =
        String::from("step,t,psi_old,psi_new,visc_cross,drag_diss,beta,ineq_residual,scale\n");
    ledger_csv.push_str(&ledger_rows.join("\n"));
    ledger_csv.push('\n');
    std::fs::write(dir.join("ledger.csv"), ledger_csv)?;
    println!(
        "finished at t = {:.4}: kinetic energy {:.6e}, max inequality residual {:.3e}",
        state.t,
        rows.last().map(|r| r.kinetic_energy).unwrap_or(0.0),
        ledger.max_residual
    );
    println!("output written to {}", dir.display());
    Ok(())
}

fn cmd_converge(args: &ConvergeArgs) -> Result<()> {
    let mut taus = Vec::new();
    let mut eus = Vec::new();
    let mut eps = Vec::new();
    let mut lines = vec!["level,tau,e_u,e_p".to_string()];
    for l in args.common.level..args.common.level + args.levels {
        let mut case = cases::by_name(&args.common.case, l).map_err(|e| anyhow::anyhow!("{e}"))?;
        let settings = Settings::load(&args.common)?;
        settings.apply(&mut case)?;
        let Some(exact) = case.exact.clone() else {
            bail!("case '{}' has no closed-form solution to converge against", case.name);
        };
        let scheme = Scheme::new(case.problem.clone(), case.cfg.clone())
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut state = scheme.initial_state().map_err(|e| anyhow::anyhow!("{e}"))?;
        let n = (case.t_end / scheme.cfg.tau).round().max(1.0) as usize;
        for _ in 0..n {
            let (next, _) = scheme.advance(&state).map_err(|e| anyhow::anyhow!("{e}"))?;
            state = next;
        }
        let t = state.t;
        let ep = scalar_error_l2_zero_mean(&scheme.asm, &scheme.p_space, &state.p, |x| {
            (exact.pressure)(x, t)
        });
        let eu =
            velocity_diff_h1_error(&scheme.asm, &scheme.vel_space, &state.u[0], &state.u[1], |x| {
                (exact.rel_velocity_grad)(x, t)
            });
        println!("level {l}: tau = {:.5e}, e_u = {eu:.5e}, e_p = {ep:.5e}", scheme.cfg.tau);
        lines.push(format!("{l},{:.12e},{eu:.12e},{ep:.12e}", scheme.cfg.tau));
        taus.push(scheme.cfg.tau);
        eus.push(eu);
        eps.push(ep);
    }
    if taus.len() >= 2 {
        println!(
            "observed orders: u_rel {:.2}, p {:.2}",
            fit_order(&taus, &eus),
            fit_order(&taus, &eps)
        );
    }
    let dir = output_dir(&args.common, &args.common.case)?;
    std::fs::write(dir.join("convergence.csv"), lines.join("\n") + "\n")?;
    println!("table written to {}", dir.join("convergence.csv").display());
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let (case, _) = setup(&args.common)?;
    let seg = Scheme::new(case.problem.clone(), case.cfg.clone())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mono = MonolithicScheme::new(case.problem.clone(), case.cfg.clone())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut ss = seg.initial_state().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut sm = mono.initial_state().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut lines = vec!["step,t,phase,rel_velocity_gap".to_string()];
    for i in 1..=args.steps {
        let (a, _) = seg.advance(&ss).map_err(|e| anyhow::anyhow!("{e}"))?;
        let (b, _) = mono.advance(&sm).map_err(|e| anyhow::anyhow!("{e}"))?;
        ss = a;
        sm = b;
        for k in 0..seg.n_phases() {
            let diff: Vec<f64> = ss.u[k].iter().zip(&sm.u[k]).map(|(x, y)| x - y).collect();
            let num = mpflow::norms::vector_l2(&seg.asm, &seg.vel_space, &diff);
            let den = mpflow::norms::vector_l2(&mono.asm, &mono.vel_space, &sm.u[k]);
            let rel = num / den.max(1e-300);
            lines.push(format!("{i},{:.6},{k},{rel:.12e}", ss.t));
            if i == args.steps {
                println!("phase {k}: relative velocity gap after {i} steps: {rel:.4e}");
            }
        }
    }
    let dir = output_dir(&args.common, &args.common.case)?;
    std::fs::write(dir.join("compare.csv"), lines.join("\n") + "\n")?;
    println!("table written to {}", dir.join("compare.csv").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Converge(a) => cmd_converge(a),
        Command::Compare(a) => cmd_compare(a),
    }
}
