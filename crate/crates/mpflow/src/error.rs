use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mesh construction failed: {0}")]
    Mesh(String),

    #[error("{method} did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    SolverFailure {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("solver breakdown in {method}: {detail}")]
    SolverBreakdown { method: &'static str, detail: String },

    #[error("momentum solve failed for phase {phase}, component {component}: {source}")]
    MomentumSolve {
        phase: usize,
        component: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value detected at step {step} in field {field}")]
    NonFinite { step: usize, field: String },

    #[error("weighted mass operator is singular (alpha <= 0 at a quadrature point); check the alpha_min monitor")]
    SingularWeightedMass,

    #[error("free-slip requested on facet marked {0:?} that is not axis-aligned")]
    FreeSlipNotAxisAligned(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
