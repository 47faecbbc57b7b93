use thiserror::Error;

/// Errors surfaced by mesh construction, discretization and solvers.
#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("l-shape meshes need an even number of subdivisions, got n = {0}")]
    OddLShape(usize),

    #[error("mesh parse error at line {line}: {message}")]
    MeshParse { line: usize, message: String },

    #[error("face {0} does not exist")]
    FaceLookup(usize),

    #[error("cell {0} does not exist")]
    CellLookup(usize),

    #[error("point ({0}, {1}) lies outside the reference triangle")]
    OutsideReference(f64, f64),

    #[error("unsupported polynomial degree {0} (supported: 2..=4)")]
    UnsupportedDegree(usize),

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("expression parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("cannot differentiate expression: {0}")]
    Differentiate(String),

    #[error("coefficient evaluation failed at ({x}, {y}): {message}")]
    Coefficient { x: f64, y: f64, message: String },

    #[error("zero Frobenius norm of A at ({0}, {1})")]
    ZeroMatrix(f64, f64),

    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("empty control set")]
    EmptyControlSet,

    #[error("the L^p_h dual norm is only computable for p = 2 (got p = {0})")]
    UnsupportedExponent(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("problem file: {0}")]
    Problem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FemError>;
