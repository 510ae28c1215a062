use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Topology(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("element {element} has more than one irregular vertex; subdivide the control mesh once")]
    MultipleIrregular { element: usize },

    #[error("parametric point ({xi1}, {xi2}) lies outside the reference triangle")]
    OutsideTriangle { xi1: f64, xi2: f64 },

    #[error("element index {element} out of range ({count} elements)")]
    NoSuchElement { element: usize, count: usize },

    #[error("degenerate surface tangents on element {element}")]
    DegenerateTangent { element: usize },

    #[error("kernel evaluated at coincident points")]
    CoincidentPoints,

    #[error("quadrature did not converge on element {element} for collocation row {row} (difference {diff:e})")]
    Quadrature { element: usize, row: usize, diff: f64 },

    #[error("singular normal matrix in least-squares fit: {0}")]
    SingularFit(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("shell operator is singular at omega = {omega}; shift the frequency or add Rayleigh damping")]
    SingularOperator { omega: f64 },

    #[error("GMRES did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, history: Vec<f64> },

    #[error("dense block system is limited to {limit} collocation points, got {n}")]
    SizeGuard { n: usize, limit: usize },

    #[error("special function overflow at order {order}, argument {x}")]
    Overflow { order: usize, x: f64 },

    #[error("unphysical shell parameters for mode {n}: {msg}")]
    Unphysical { n: usize, msg: String },

    #[error("modal impedance denominator vanishes for mode {n}")]
    ImpedancePole { n: usize },

    #[error("series did not converge within {n_trunc} terms (last term {last:e})")]
    SeriesNotConverged { n_trunc: usize, last: f64 },

    #[error("oracle pressure vanishes at sample {index}")]
    ZeroOracle { index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("scenario: {0}")]
    Scenario(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
