use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("panel: {0}")]
    Panel(String),

    #[error("series lengths differ: subject `{subject}` has length {found}, expected {expected}")]
    LengthMismatch {
        subject: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown subject id `{0}`")]
    UnknownSubject(String),

    #[error("non-numeric value `{value}` in {context}")]
    NonNumeric { value: String, context: String },

    #[error("unknown level `{level}` for categorical covariate `{covariate}`")]
    UnknownLevel { covariate: String, level: String },

    #[error("series too short: T = {0}, need at least 8")]
    SeriesTooShort(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mode finding did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    ModeNotConverged { iterations: usize, grad_norm: f64 },

    #[error("node cannot be split: no admissible cutpoints")]
    NotSplittable,

    #[error("AR coefficients {0:?} are not stationary")]
    NonStationary(Vec<f64>),

    #[error("covariate `{0}` is categorical; ALE requires an ordered covariate")]
    CategoricalAle(String),

    #[error("frequency band {0} contains no Fourier frequencies")]
    EmptyBand(&'static str),

    #[error("truth values must be positive (found {0})")]
    NonPositiveTruth(f64),

    #[error("unknown simulation setting `{name}`; valid settings: {valid}")]
    UnknownSetting { name: String, valid: String },

    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),

    #[error("malformed draws file: {0}")]
    DrawsFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Encode(#[from] rmp_serde::encode::Error),

    #[error(transparent)]
    Decode(#[from] rmp_serde::decode::Error),
}
