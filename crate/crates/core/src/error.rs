use thiserror::Error;

/// Errors surfaced by the verification pipeline.
///
/// Parameter gates always name the violated inequality so that a rejected
/// configuration can be reported verbatim to the user.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter {name}: requires {constraint}")]
    InvalidParameter { name: String, constraint: String },

    #[error("overflow in {context}; rescale or shrink the domain")]
    Overflow { context: String },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("node count {nodes} exceeds the memory budget of {budget} nodes")]
    MemoryBudget { nodes: usize, budget: usize },

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("eigensolver did not converge: {0}")]
    EigenConvergence(String),

    #[error("empty sample set: {0}")]
    EmptySamples(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(name: &str, constraint: &str) -> Self {
        CoreError::InvalidParameter {
            name: name.to_string(),
            constraint: constraint.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
