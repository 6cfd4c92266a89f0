use std::fmt;

use bwssl_core::Error;

/// A command failure classified by process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, config or inputs: exit 2.
    Usage(anyhow::Error),
    /// Non-finite training loss: exit 3.
    Diverged(anyhow::Error),
    /// Anything else: exit 1.
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }

    /// Prefix the message while keeping the classification.
    pub fn context(self, ctx: impl fmt::Display) -> Self {
        let wrap = |e: anyhow::Error| e.context(ctx.to_string());
        match self {
            Failure::Usage(e) => Failure::Usage(wrap(e)),
            Failure::Diverged(e) => Failure::Diverged(wrap(e)),
            Failure::Runtime(e) => Failure::Runtime(wrap(e)),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(e) | Failure::Diverged(e) | Failure::Runtime(e)) = self;
        write!(f, "{e:#}")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Divergence { .. } => Failure::Diverged(e.into()),
            Error::Invalid(_) | Error::Json(_) | Error::Format { .. } | Error::Shape(_) => {
                Failure::Usage(e.into())
            }
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Usage(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}
