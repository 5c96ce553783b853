use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the laboratory. Verification routines distinguish a
/// violated *hypothesis* (the run asked for something outside a proposition's
/// assumptions) from a violated *conclusion* (which signals an inconsistent
/// parameter ledger or a model bug).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("integration budget exceeded after {steps} steps at t={t}")]
    IntegrationBudgetExceeded { steps: usize, t: f64 },
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("root bracket does not straddle a sign change on [{a}, {b}]")]
    NoBracket { a: f64, b: f64 },
    #[error("hypothesis failed at step {step}: {what}")]
    HypothesisFailed { step: usize, what: String },
    #[error("epsilon {eps} is not below |h(t_U)| = {limit}")]
    EpsTooLarge { eps: f64, limit: f64 },
    #[error("only {found} exit crossings found, {requested} requested")]
    NotEnoughCrossings { found: usize, requested: usize },
    #[error("degenerate tangent vector (|dF/dt| = {norm:.3e})")]
    DegenerateTangent { norm: f64 },
    #[error("no section radius found after {halvings} halvings")]
    NoRadiusFound { halvings: usize },
    #[error("flowline never reaches the exit plane (x3 stalled at {x3:.3e})")]
    NoEscape { x3: f64 },
    #[error("Newton iteration diverged near t={seed}")]
    NewtonDiverged { seed: f64 },
    #[error("transversality lost: |d/dt G(F(t,y))| = {deriv:.3e} at the root")]
    TransversalityLost { deriv: f64 },
    #[error("point outside the map domain: {0}")]
    DomainViolation(String),
    #[error("inner endpoint missed M_E(r_j): |P_L endpoint| = {dist:.3e} >= r_j = {r_j:.3e}")]
    RadiusMiss { dist: f64, r_j: f64 },
    #[error("angle correction inconsistent: <v,w> = {cos_val:.3e} <= 0")]
    AngleInconsistent { cos_val: f64 },
    #[error("flowline left the unit box at integer time {step} (|P_U| = {p_u:.3e})")]
    DomainExit { step: usize, p_u: f64 },
    #[error("lift constructions disagree by {mismatch:.3e} at t={t}")]
    LiftMismatch { t: f64, mismatch: f64 },
    #[error("ledger infeasible at `{name}` (slack {slack:.3e})")]
    LedgerInfeasible { name: String, slack: f64 },
    #[error("angle crossing not found for level {level}")]
    CrossingNotFound { level: f64 },
    #[error("angle gap violated: measured {measured:.6} < 4*pi")]
    GapViolated { measured: f64 },
    #[error("curve refinement failed at step {step}: {what}")]
    RefinementFailed { step: usize, what: String },
    #[error("window budget exceeded: {requested} > {budget}")]
    WindowBudgetExceeded { requested: usize, budget: usize },
    #[error("spectrum mismatch: {0}")]
    SpectrumMismatch(String),
    #[error("manifold fit diverged: {0}")]
    FitDiverged(String),
    #[error("derivative bound {requested} unachievable (sampled sup {achieved:.3e})")]
    LambdaUnachievable { requested: f64, achieved: f64 },
    #[error("contraction stalled after {iters} iterations (step {step:.3e})")]
    ContractionStalled { iters: usize, step: f64 },
    #[error("envelope violated: {0}")]
    EnvelopeViolated(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
