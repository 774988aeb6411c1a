use thiserror::Error;

/// Errors raised by network construction, surgery and (de)serialization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("layer {layer}: {what}")]
    Shape { layer: usize, what: String },
    #[error("input has length {got}, expected {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("layer index {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("neuron index {neuron} out of range for layer {layer} of width {width}")]
    NeuronOutOfRange { layer: usize, neuron: usize, width: usize },
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("output fusion needs at least two outputs")]
    SingleOutput,
    #[error("degenerate architecture: {0}")]
    Degenerate(String),
    #[error("invalid slope range ({lo}, {hi}); need 0 < lo < hi <= 1")]
    SlopeRange { lo: f64, hi: f64 },
    #[error("model file: {0}")]
    Format(String),
}

/// Errors raised by the query interface.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("query budget of {limit} exhausted during phase `{phase}`")]
    BudgetExhausted { limit: u64, phase: String },
    #[error("query rejected: non-finite input")]
    NonFiniteInput,
    #[error("query rejected: input has length {got}, expected {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("invalid feedback mode: {0}")]
    InvalidMode(String),
    #[error("transport: {0}")]
    Transport(String),
}

/// Errors raised by the attack phases.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("expansive architecture: {0}")]
    Expansive(String),
    #[error("label {0} not available in feedback")]
    LabelUnavailable(usize),
    #[error("score out of range: {0}")]
    ScoreOutOfRange(f64),
    #[error("feedback mode does not support this view: {0}")]
    IncompatibleMode(String),
    #[error("no critical point: {0}")]
    NotCritical(String),
    #[error("ambiguous sign comparison for direction {0}")]
    SignAmbiguous(usize),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("witness rejected: {0}")]
    WitnessRejected(String),
    #[error("insufficient witnesses: {0}")]
    InsufficientWitnesses(String),
    #[error("indeterminate sign/slope (magnitudes tie): {0}")]
    Indeterminate(String),
    #[error("region escape: {0}")]
    RegionEscape(String),
    #[error("starting-point walk failed after {0} rounds")]
    StartingPoints(usize),
    #[error("entrapment: {0}")]
    Entrapment(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("refinement failed: {0}")]
    Refinement(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;
