//! Maps errors to process exit codes.

use smallify_core::Error as CoreError;
use smallify_proplab::Error as PropError;

/// A proposition check ran and did not hold.
#[derive(Debug)]
pub struct VerificationFailed(pub usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} proposition check(s) failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Internal,
    Config,
    Data,
    Io,
    Format,
    State,
    Numerical,
    Verification,
}

impl Category {
    /// 2 is left to argument parsing.
    pub fn code(self) -> u8 {
        match self {
            Category::Internal => 1,
            Category::Config => 3,
            Category::Data => 4,
            Category::Io => 5,
            Category::Format => 6,
            Category::State => 7,
            Category::Numerical => 8,
            Category::Verification => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Config => "config",
            Category::Data => "data",
            Category::Io => "io",
            Category::Format => "format",
            Category::State => "state",
            Category::Numerical => "numerical",
            Category::Verification => "verification",
        }
    }
}

fn core_category(e: &CoreError) -> Category {
    match e {
        CoreError::Argument(_) | CoreError::Config(_) => Category::Config,
        CoreError::Dimension(_) | CoreError::Parse { .. } | CoreError::Schema(_) => Category::Data,
        CoreError::Format(_) | CoreError::Corruption(_) => Category::Format,
        CoreError::State(_) | CoreError::Refused(_) => Category::State,
        CoreError::Io(_) => Category::Io,
    }
}

pub fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_category(e);
        }
        if let Some(e) = cause.downcast_ref::<PropError>() {
            return match e {
                PropError::Argument(_) => Category::Config,
                PropError::Convergence { .. } | PropError::NoMinimum(_) => Category::Numerical,
                PropError::Core(c) => core_category(c),
            };
        }
        if cause.downcast_ref::<VerificationFailed>().is_some() {
            return Category::Verification;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Io;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return Category::Format;
        }
    }
    Category::Internal
}
