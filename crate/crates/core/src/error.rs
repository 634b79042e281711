use std::fmt;

use thiserror::Error;

/// Where in a source string a parse error was detected (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: Position, message: String },

    #[error("unbound variable `{name}` at {pos} (dimension is {n})")]
    UnboundVariable { name: String, pos: Position, n: usize },

    #[error("function `{name}` at {pos} expects {expected} argument(s), got {got}")]
    Arity {
        name: String,
        pos: Position,
        expected: usize,
        got: usize,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("fast-time variable outside jump context")]
    FastTimeOutsideJump,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("jump escapes domain at s = {s}")]
    JumpEscapesDomain { s: f64 },

    #[error("jump not converged: doubling steps changed the endpoint by {delta:e}")]
    NotConverged { delta: f64 },

    #[error("integrator step underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("integrator exceeded {0} steps")]
    TooManySteps(usize),

    #[error("no contraction window: {0}")]
    NoContractionWindow(String),

    #[error("n too small: mollified supports overlap or leave the horizon ({0})")]
    SupportOverlap(String),

    #[error("empty boundary sample")]
    EmptyBoundarySample,

    #[error("not an equilibrium: |f(x*)| = {f_residual:e}, |g(x*)| = {g_residual:e}")]
    NotEquilibrium { f_residual: f64, g_residual: f64 },

    #[error("empty admissible grid")]
    EmptyAdmissibleGrid,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
