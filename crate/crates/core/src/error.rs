use thiserror::Error;

/// Which nodal field a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Phase,
    Concentration,
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Field::Phase => f.write_str("phi"),
            Field::Concentration => f.write_str("C"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver diverged: non-finite {field} residual in element {element}")]
    Divergence { element: usize, field: Field },

    #[error("Newton solver did not converge at step {step} after {iterations} iterations (residual norm {residual:.3e})")]
    NonConvergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("singular tangent matrix at step {step}: {detail}")]
    Singular { step: usize, detail: String },

    #[error("adjoint solve failed at step {step}: {detail}")]
    Adjoint { step: usize, detail: String },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a time-step index to errors raised by a single-step solve.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonConvergence {
                iterations,
                residual,
                ..
            } => Error::NonConvergence {
                step,
                iterations,
                residual,
            },
            Error::Singular { detail, .. } => Error::Singular { step, detail },
            Error::Adjoint { detail, .. } => Error::Adjoint { step, detail },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
