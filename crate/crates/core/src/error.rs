use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vector {0:?} is not a lattice vector")]
    NotALatticeVector([f64; 3]),
    #[error("degenerate dislocation frame: {0}")]
    DegenerateFrame(String),
    #[error("no lattice vector parallel to the line within coefficient bound {0}")]
    PeriodSearchFailed(i64),
    #[error("stencil cannot span the plane for species {0} even after enlargement")]
    Cond1Violation(usize),
    #[error("domain has only {0} interior sites")]
    DomainTooSmall(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("gap of length {len:.3} exceeds 3 r_cut at site {site}")]
    DomainEscape { site: usize, len: f64 },
    #[error("shift Hessian is singular on the shift quotient")]
    SingularShiftHessian,
    #[error("unstable potential: normalized eigenvalue {value:.3e} at k = {k:?}")]
    UnstablePotential { value: f64, k: [f64; 2] },
    #[error("singular dynamical matrix at k = {0:?}")]
    SingularMode([f64; 2]),
    #[error("sextic roots coincide (separation {0:.2e})")]
    DegenerateSextic(f64),
    #[error("core map inversion failed at {0:?}")]
    InversionFailure([f64; 2]),
    #[error("burgers vector projection is not a vector of the projected lattice")]
    MisalignedBurgers,
    #[error("site {0:?} or one of its neighbours lies outside the stored domain")]
    OutOfDomain([i64; 2]),
    #[error("line search failed after {0} iterations")]
    LineSearchFailure(usize),
    #[error("no convergence within {0} iterations")]
    MaxIterExceeded(usize),
    #[error("fit window has only {0} populated bins")]
    EmptyWindow(usize),
    #[error("relaxation did not converge")]
    NotConverged,
}

pub type Result<T> = std::result::Result<T, Error>;
