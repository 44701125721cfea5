use std::fmt;

/// Process exit status categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Internal = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Data, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a fallible result with an exit category and a context message.
pub trait Classify<T> {
    fn or_usage(self, ctx: impl fmt::Display) -> CliResult<T>;
    fn or_data(self, ctx: impl fmt::Display) -> CliResult<T>;
    fn or_internal(self, ctx: impl fmt::Display) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn or_usage(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::new(ExitKind::Usage, e.into().context(ctx.to_string())))
    }

    fn or_data(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::new(ExitKind::Data, e.into().context(ctx.to_string())))
    }

    fn or_internal(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::new(ExitKind::Internal, e.into().context(ctx.to_string())))
    }
}
